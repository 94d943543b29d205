import hashlib
import json
import os
import tempfile
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Union


def content_hash(payload: Mapping[str, Any], length: int = 16) -> str:
    """
    Deterministic hash of a JSON-serializable mapping (key order independent).
    """
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    hex_dig = hashlib.sha256(canonical.encode('utf-8')).hexdigest()
    return hex_dig[:length]


def ensure_directory(path: Union[str, Path]):
    Path(path).mkdir(parents=True, exist_ok=True)


def atomic_write_text(path: Union[str, Path], text: str):
    """Write to a sibling temp file then rename over the target."""
    path = Path(path)
    ensure_directory(path.parent)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def parse_real(value: Any) -> float:
    """
    Accepts numbers and fraction strings such as "8/255".
    """
    if isinstance(value, bool):
        raise ValueError(f"expected a real number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    raise ValueError(f"expected a real number, got {value!r}")
