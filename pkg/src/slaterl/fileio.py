"""Write-then-rename helpers so a crash never leaves a torn output file."""
import io
import json
import os
import tempfile
import zipfile

import numpy as np


def atomic_write_bytes(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def append_jsonl(path, record):
    """Append one JSON record, rewriting the file atomically."""
    old = b""
    if os.path.exists(path):
        with open(path, "rb") as fh:
            old = fh.read()
    atomic_write_bytes(path, old + (json.dumps(record, sort_keys=True) + "\n").encode())


def npz_bytes(**arrays):
    """``.npz`` archive bytes with fixed entry timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            body = io.BytesIO()
            np.lib.format.write_array(body, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(info, body.getvalue())
    return buf.getvalue()
