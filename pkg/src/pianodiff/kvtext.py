"""``key = value`` text files used for configs and manifests."""
from __future__ import annotations

import hashlib


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dumps(d: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in d.items())


def loads(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def load(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


def dump(path, d: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(d))


def content_hash(d: dict) -> str:
    canonical = dumps(dict(sorted(d.items())))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
