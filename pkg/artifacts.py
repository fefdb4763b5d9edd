"""artifacts.py — atomic artifact writes and the config echo carried by every output."""

import json
import pathlib

CONFIG_PREFIX = "# config="


def atomic_write(path, data):
    """Write text or bytes to a sibling temp file, then rename it over `path`.

    Readers only ever see a complete file; a failed write leaves no artifact.
    """
    path = pathlib.Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if isinstance(data, bytes):
            tmp.write_bytes(data)
        else:
            with tmp.open("w", encoding="utf-8", newline="\n") as fh:
                fh.write(data)
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def config_line(config):
    """Single-line config echo for the top of CSV artifacts."""
    return CONFIG_PREFIX + json.dumps(config, sort_keys=True, separators=(",", ":"))


def read_config_line(path):
    """Recover the echoed config from a CSV artifact, or None."""
    with pathlib.Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.startswith(CONFIG_PREFIX):
                return json.loads(line[len(CONFIG_PREFIX):])
            if not line.startswith("#"):
                return None
    return None


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"
