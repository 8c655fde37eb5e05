"""
Formatting utilities for reports and CSV artifacts.
"""
import math
from typing import Any, Dict, Iterator, Tuple

import numpy as np


def format_float(value: float) -> str:
    """
    Shortest round-trip text for a float, so identical runs give identical bytes.
    Example: 0.1 -> 0.1, 1e-20 -> 1e-20, nan -> nan
    """
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def format_value(value: Any) -> str:
    """Scalars as text, sequences comma-separated, None as an empty string"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, np.ndarray):
        return format_value(value.tolist())
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def flatten_record(record: Dict[str, Any], prefix: str = "") -> Iterator[Tuple[str, Any]]:
    """
    Nested dicts become dotted keys; lists of dicts become indexed keys.
    Example: {"a": {"b": 1}, "c": [{"d": 2}]} -> a.b, c.0.d
    """
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from flatten_record(value, f"{name}.")
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, dict) for v in value):
            for i, item in enumerate(value):
                yield from flatten_record(item, f"{name}.{i}.")
        else:
            yield name, value


def format_report(record: Dict[str, Any], header: str = "") -> str:
    """key = value text, one line per flattened key, in insertion order"""
    lines = [f"# {header}"] if header else []
    lines.extend(f"{key} = {format_value(value)}" for key, value in flatten_record(record))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, str]:
    """Inverse of format_report at the text level (values stay strings)"""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
