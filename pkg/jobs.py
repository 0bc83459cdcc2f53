"""Параллельный запуск независимых задач с ограничением числа потоков"""

import asyncio
import logging
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger("SSGL")

T = TypeVar("T")


async def _gather_bounded(jobs: Sequence[Callable[[], T]], threads: int) -> List[T]:
    semaphore = asyncio.Semaphore(max(1, threads))

    async def _run(job: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(job)

    # gather сохраняет порядок задач, поэтому редукция детерминирована
    return await asyncio.gather(*(_run(job) for job in jobs))


def run_jobs(jobs: Sequence[Callable[[], T]], threads: int = 1) -> List[T]:
    """Выполняет задачи и возвращает результаты в порядке подачи.

    При threads <= 1 задачи идут последовательно в текущем потоке.
    """
    if not jobs:
        return []
    if threads <= 1 or len(jobs) == 1:
        return [job() for job in jobs]
    logger.debug("Running %d jobs on %d threads", len(jobs), threads)
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return asyncio.run(_gather_bounded(jobs, threads))
    # уже внутри event loop (например, вызов из async-кода): без вложенного loop
    return [job() for job in jobs]
