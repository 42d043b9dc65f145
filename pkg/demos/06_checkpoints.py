"""
Checkpoint files
=================

Tensors are written with a small binary layout and a trailing CRC.  Damaged
files are refused with distinct errors.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from aquila import checkpoint
from aquila.errors import BadMagicError, ChecksumError, TruncatedFileError

tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.linspace(0, 1, 4)}
path = Path(tempfile.mkdtemp()) / "demo.ckpt"
checkpoint.save(path, tensors)
raw = path.read_bytes()
print(len(raw), "bytes, magic", raw[:4])
print({k: (v.shape, v.dtype) for k, v in checkpoint.load(path).items()})

# %%
flipped = bytearray(raw)
flipped[-6] ^= 1  # inside the last tensor's data
for label, blob in [("truncated", raw[:-9]), ("bit flip", bytes(flipped)), ("wrong magic", b"ZZZZ" + raw[4:])]:
    try:
        checkpoint.decode(blob)
    except (TruncatedFileError, ChecksumError, BadMagicError) as exc:
        print(f"{label:12s} -> {type(exc).__name__}: {exc}")
