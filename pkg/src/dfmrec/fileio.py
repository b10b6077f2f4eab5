"""Small file helpers: atomic writes and model-container magic sniffing."""

import os
import tempfile

FM_MAGIC = b"FMRE"
DFM_MAGIC = b"FMBI"
CKPT_MAGIC = b"FMCK"
CONTAINER_VERSION = 1


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename.

    Guarantees readers never observe a torn file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp defaults to 0600
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def sniff_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)
