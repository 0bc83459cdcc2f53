"""
Запись артефактов: JSON-модель и отчеты, CSV-таблицы с 17 значащими
цифрами и (по флагу) книга Excel со стилизованным заголовком.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill

from errors import SsglValidationError

logger = logging.getLogger("SSGL")

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"

HEADER_FONT = Font(bold=True, color="FFFFFF")
HEADER_FILL = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
HEADER_ALIGNMENT = Alignment(horizontal="center", vertical="center")


class ExportError(SsglValidationError):
    """Не удалось записать артефакт"""


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: Path, payload: dict, provenance: dict) -> Path:
    """JSON со schema_version и provenance; float пишутся кратчайшим точным repr"""
    document = {"schema_version": SCHEMA_VERSION, "provenance": provenance}
    document.update(payload)
    try:
        path.write_text(json.dumps(_jsonable(document), indent=2, ensure_ascii=False), encoding="utf-8")
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)
    return path


def read_json(path: Path) -> dict:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ExportError(f"cannot read model file {path}: {e}") from e
    if document.get("schema_version") != SCHEMA_VERSION:
        raise ExportError(f"{path}: unsupported schema_version {document.get('schema_version')!r}")
    return document


def write_csv(path: Path, frame: pd.DataFrame, provenance: Optional[dict] = None) -> Path:
    """CSV с точностью %.17g; хэш конфигурации и seed пишутся в столбцы"""
    out = frame.copy()
    if provenance is not None:
        out["config_hash"] = provenance["config_hash"]
        out["seed"] = provenance["seed"]
    try:
        out.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    logger.info("Wrote %s (%d rows)", path, len(out))
    return path


def _style_header(ws, n_columns: int) -> None:
    for col in range(1, n_columns + 1):
        cell = ws.cell(row=1, column=col)
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.alignment = HEADER_ALIGNMENT


def _autofit(ws, cap: int = 50) -> None:
    for column in ws.columns:
        width = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
        ws.column_dimensions[column[0].column_letter].width = min(width + 2, cap)


def export_tables_to_excel(path: Path, tables: Dict[str, pd.DataFrame], provenance: dict) -> Path:
    """Книга Excel: по листу на таблицу и лист с параметрами запуска"""
    wb = Workbook()
    wb.remove(wb.active)
    for title, frame in tables.items():
        ws = wb.create_sheet(title[:31])
        ws.append([str(c) for c in frame.columns])
        for row in frame.itertuples(index=False):
            ws.append([_jsonable(v) if not isinstance(v, (list, dict)) else json.dumps(_jsonable(v))
                       for v in row])
        _style_header(ws, frame.shape[1])
        _autofit(ws)

    info = wb.create_sheet("provenance")
    info.append(["key", "value"])
    info.append(["config_hash", provenance["config_hash"]])
    info.append(["seed", provenance["seed"]])
    info.append(["created_at", provenance["created_at"]])
    info.append(["config", json.dumps(provenance["config"], sort_keys=True)])
    _style_header(info, 2)
    _autofit(info, cap=80)

    try:
        wb.save(path)
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    logger.info("Wrote %s", path)
    return path
