"""Small shared helpers: order-preserving parallel maps, atomic writes,
canonical hashing."""

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, n: int, threads: int = 1) -> list:
    """fn(i) for i in range(n), results in index order.

    Each work item must be independent and pure given i; with
    threads == 1 this is a plain loop. Results are gathered by index,
    so any reduction over them is order-independent of the scheduling.
    """
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_of(obj) -> str:
    return sha256_hex(canonical_json(obj).encode("utf-8"))
