"""
Исключения SSGL.

Каждое исключение несет exit_code, который CLI возвращает как статус процесса:
2: ошибка валидации входных данных, 3: численный сбой.
"""

from typing import Optional


class SsglError(Exception):
    """Базовое исключение пакета"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class SsglValidationError(SsglError, ValueError):
    exit_code = 2


class SsglNumericalError(SsglError, ArithmeticError):
    exit_code = 3


# ----------------------
# Validation
# ----------------------

class RankDeficientGroup(SsglValidationError):
    def __init__(self, group_id: str, rank: int, size: int):
        super().__init__(f"group {group_id!r} has numerical rank {rank} < {size}")
        self.group_id = group_id
        self.rank = rank
        self.size = size


class SampleTooSmall(SsglValidationError):
    def __init__(self, group_id: str, n: int, size: int):
        super().__init__(f"group {group_id!r}: n={n} must exceed group size {size}")
        self.group_id = group_id


class DimensionMismatch(SsglValidationError):
    pass


class TooFewDistinctValues(SsglValidationError):
    pass


class InvalidAlpha(SsglValidationError):
    pass


class CsvFormatError(SsglValidationError):
    def __init__(self, path: str, detail: str, row: Optional[int] = None):
        where = f"{path}:{row}" if row is not None else path
        super().__init__(f"{where}: {detail}")
        self.path = path
        self.row = row


# ----------------------
# Numerical
# ----------------------

class NonFinite(SsglNumericalError):
    pass


class MaxIterExceeded(SsglNumericalError):
    pass


class DegenerateColumn(SsglNumericalError):
    pass


class DegenerateVariance(SsglNumericalError):
    pass


class DegenerateVarianceWarning(RuntimeWarning):
    """σ² упала ниже минимального порога и была ограничена снизу"""


class ExtrapolationWarning(UserWarning):
    """Точки сетки вне граничных узлов сплайна"""
