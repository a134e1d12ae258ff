"""Self-describing binary container for trained systems.

Layout: magic ``RNSY``, format version (u32 LE), header length (u32 LE),
a JSON header carrying dimensions / tau / activation epsilon / stencils /
the payload byte count, the raw little-endian float64 parameter blocks in
a fixed order, and a CRC32 trailer over the payload.  Round trips are
bit-exact on every parameter, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

from .resnet import ActivationSpec, LayerParams, ResNetParams, ResNetSystem

MAGIC = b"RNSY"
FORMAT_VERSION = 1


class ModelIOError(IOError):
    """Base class for model-file problems."""


class CorruptModelError(ModelIOError):
    """Truncated, mangled, or checksum-failing file."""


class VersionMismatchError(ModelIOError):
    """The file was written by an unsupported format version."""


class DimensionMismatchError(ModelIOError):
    """Header dimensions are inconsistent with the payload or each other."""


def _net_arrays(net: ResNetParams):
    yield net.opening.weights
    yield net.opening.bias
    for layer in net.hidden:
        yield layer.weights
        yield layer.bias
    yield net.closing


def save_model(system: ResNetSystem, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "state_dim": system.state_dim,
        "dt_step": system.dt_step,
        "stencils": [list(st) for st in system.stencils],
        "nets": [
            {
                "input_dim": net.input_dim,
                "output_dim": net.output_dim,
                "depth": net.depth,
                "hidden_width": net.hidden_width,
                "tau": net.tau,
                "epsilon": net.activation.epsilon,
            }
            for net in system.nets
        ],
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for net in system.nets
        for a in _net_arrays(net)
    )
    header["payload_bytes"] = len(payload)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_model(path) -> ResNetSystem:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptModelError(f"{path}: not a model file")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    header_len = int.from_bytes(blob[8:12], "little")
    if len(blob) < 12 + header_len + 4:
        raise CorruptModelError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptModelError(f"{path}: unreadable header ({err})") from None

    payload_bytes = header.get("payload_bytes", -1)
    payload = blob[12 + header_len : 12 + header_len + payload_bytes]
    trailer = blob[12 + header_len + payload_bytes : 12 + header_len + payload_bytes + 4]
    if len(payload) != payload_bytes or len(trailer) != 4 or (
        len(blob) != 12 + header_len + payload_bytes + 4
    ):
        raise CorruptModelError(f"{path}: truncated or padded payload")
    if zlib.crc32(payload) != int.from_bytes(trailer, "little"):
        raise CorruptModelError(f"{path}: payload checksum mismatch")

    state_dim = header["state_dim"]
    stencils = header["stencils"]
    specs = header["nets"]
    if len(specs) != state_dim or len(stencils) != state_dim:
        raise DimensionMismatchError(
            f"{path}: {len(specs)} nets / {len(stencils)} stencils for state "
            f"dimension {state_dim}"
        )

    floats = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > floats.size:
            raise DimensionMismatchError(
                f"{path}: payload too small for the declared dimensions"
            )
        out = floats[pos : pos + size].reshape(shape)
        pos += size
        return out

    nets = []
    for meta, stencil in zip(specs, stencils):
        d, d_star = meta["input_dim"], meta["output_dim"]
        L, n = meta["depth"], meta["hidden_width"]
        if len(stencil) != d:
            raise DimensionMismatchError(
                f"{path}: stencil of length {len(stencil)} for input width {d}"
            )
        opening = LayerParams(take((n, d)), take((n,)))
        hidden = tuple(
            LayerParams(take((n, n)), take((n,))) for _ in range(L - 2)
        )
        closing = take((d_star, n))
        nets.append(
            ResNetParams(
                input_dim=d,
                output_dim=d_star,
                depth=L,
                hidden_width=n,
                tau=meta["tau"],
                opening=opening,
                hidden=hidden,
                closing=closing,
                activation=ActivationSpec(meta["epsilon"]),
            )
        )
    if pos != floats.size:
        raise DimensionMismatchError(f"{path}: {floats.size - pos} floats left over")
    return ResNetSystem(
        tuple(nets),
        tuple(tuple(st) for st in stencils),
        state_dim,
        header.get("dt_step"),
    )
