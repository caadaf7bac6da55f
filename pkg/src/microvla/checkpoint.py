"""Versioned binary checkpoint container.

Layout: magic, version, config as key-value text, named little-endian
parameter blobs, then a 64-bit digest of the blob section. Round-trips are
bit-exact; the digest is verified on load.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import tensor as T
from .codec import ActionCodec
from .encoder import EncoderParams
from .errors import StateError
from .policy import LayerParams, Model, PolicyConfig, PolicyParams

MAGIC = b"MVLACKPT"
VERSION = 1


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr)
    dtype = data.dtype.newbyteorder("<").str
    raw = data.astype(dtype, copy=False).tobytes()
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb
    db = dtype.encode()
    head += struct.pack("<B", len(db)) + db
    head += struct.pack("<B", data.ndim)
    head += b"".join(struct.pack("<I", s) for s in data.shape)
    return head + struct.pack("<Q", len(raw)) + raw


def _unpack_blob(buf: bytes, off: int) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off:off + nlen].decode()
    off += nlen
    (dlen,) = struct.unpack_from("<B", buf, off)
    off += 1
    dtype = buf[off:off + dlen].decode()
    off += dlen
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    (rlen,) = struct.unpack_from("<Q", buf, off)
    off += 8
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                        offset=off).reshape(shape).copy()
    off += rlen
    return name, arr, off


def save_checkpoint(path, model: Model, codec: ActionCodec | None = None,
                    extra_config: dict[str, str] | None = None):
    """Write model weights (and optionally the fitted codec) to `path`."""
    kv = dict(model.config.to_kv())
    kv["encoder.patch_size"] = str(model.encoder.patch_size)
    for key, value in (extra_config or {}).items():
        kv[f"run.{key}"] = value
    config_text = "".join(f"{k}={kv[k]}\n" for k in sorted(kv)).encode()

    blobs = [(name, p.data) for name, p in model.named_params()]
    if codec is not None:
        blobs.append(("codec.edges", codec.edges))
        blobs.append(("codec.vocab_offsets", codec.vocab_offsets))
    blob_section = struct.pack("<I", len(blobs)) + b"".join(
        _pack_blob(name, arr) for name, arr in blobs
    )
    digest = hashlib.blake2b(blob_section, digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(blob_section)
        fh.write(digest)


def load_checkpoint(path) -> tuple[Model, ActionCodec | None, dict[str, str]]:
    """Read a checkpoint; verifies magic, version and blob digest."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise StateError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", buf, 12)
    off = 16
    config_text = buf[off:off + clen].decode()
    off += clen
    blob_section = buf[off:-8]
    if hashlib.blake2b(blob_section, digest_size=8).digest() != buf[-8:]:
        raise StateError(f"{path}: checksum mismatch, checkpoint corrupt")

    kv: dict[str, str] = {}
    for line in config_text.splitlines():
        key, _, value = line.partition("=")
        kv[key] = value
    run_config = {k[4:]: v for k, v in kv.items() if k.startswith("run.")}
    cfg = PolicyConfig.from_kv(kv)

    (n_blobs,) = struct.unpack_from("<I", blob_section, 0)
    pos = 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        name, arr, pos = _unpack_blob(blob_section, pos)
        arrays[name] = arr

    def param(name):
        if name not in arrays:
            raise StateError(f"{path}: missing parameter blob {name!r}")
        return T.Tensor(arrays[name], requires_grad=True)

    enc = EncoderParams(
        patch_size=int(kv["encoder.patch_size"]),
        w_a=param("encoder.w_a"), b_a=param("encoder.b_a"),
        w_b=param("encoder.w_b"), b_b=param("encoder.b_b"),
        w_proj=param("encoder.w_proj"), b_proj=param("encoder.b_proj"),
    )
    layers = []
    for i in range(cfg.n_layers):
        names = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o",
                 "ln2_g", "ln2_b", "w_up", "b_up", "w_down", "b_down")
        layers.append(LayerParams(*[param(f"policy.layer{i}.{n}") for n in names]))
    pol = PolicyParams(
        config=cfg,
        token_table=param("policy.token_table"),
        pos_table=param("policy.pos_table"),
        layers=layers,
        ln_f_g=param("policy.ln_f_g"),
        ln_f_b=param("policy.ln_f_b"),
        w_head=param("policy.w_head"),
        b_head=param("policy.b_head"),
        action_queries=param("policy.action_queries"),
    )
    codec = None
    if "codec.edges" in arrays:
        codec = ActionCodec(edges=arrays["codec.edges"],
                            vocab_offsets=arrays["codec.vocab_offsets"])
    return Model(config=cfg, encoder=enc, policy=pol), codec, run_config
