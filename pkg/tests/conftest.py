import struct

import numpy as np
import pytest


def nifti_bytes(data, endian="<", datatype=16, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0, vox_offset=352.0):
    """Hand-packed single-file NIfTI-1 image; ``data`` is (nx, ny, nz[, c])."""
    data = np.asarray(data)
    dims = data.shape
    ndim = len(dims)
    dim = [ndim, *dims] + [1] * (7 - ndim)
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    bitpix = {4: 16, 8: 32, 16: 32, 64: 64}[datatype]
    struct.pack_into(endian + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", hdr, 108, vox_offset)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\0"
    dtype = np.dtype(endian + {4: "i2", 8: "i4", 16: "f4", 64: "f8"}[datatype])
    body = np.asarray(data, dtype=dtype).tobytes(order="F")
    pad = b"\0" * (int(vox_offset) - 348)
    return bytes(hdr) + pad + body


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_acceptance(number, name, ok, detail):
    ACCEPTANCE[number] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
