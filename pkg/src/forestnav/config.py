"""Plain-text key/value configuration files.

One `key = value` assignment per line, `#` starts a comment, blank lines
ignored. Keys are dotted paths grouping related settings (`vehicle.l1`,
`gains.k_phi`, `weights.progress`). Values parse as bool, int, float, or
bare string. All physical quantities are SI.
"""

from __future__ import annotations

from pathlib import Path


def _parse_value(raw: str):
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def load_kv(path: str | Path) -> dict:
    """Parse a key/value file into a flat dict."""
    cfg: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = body.split("=", 1)
        cfg[key.strip()] = _parse_value(raw)
    return cfg


def save_kv(cfg: dict, path: str | Path, header: str | None = None) -> None:
    """Write a flat dict back out in the same format, keys sorted."""
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    Path(path).write_text("\n".join(lines) + "\n")


def subsection(cfg: dict, prefix: str) -> dict:
    """Entries under `prefix.` with the prefix stripped."""
    p = prefix if prefix.endswith(".") else prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
