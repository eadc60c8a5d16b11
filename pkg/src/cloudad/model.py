"""Token embedder, advisor-attention encoder-decoder, and checkpoints.

The embedder turns each point group into one token: a shared two-stage
per-point MLP with max-pooling plus a learned positional encoding of the
group center, then a single random-feature attention layer mixes tokens
globally. The encoder-decoder is a stack of pre-norm residual blocks whose
attention reads the layer's advisor state S through phi(q) S^T; the blocks
reconstruct the token batch and the reconstruction error is the anomaly
signal.

Everything runs on the local autodiff tape so the exact same graph serves
training (float32) and finite-difference verification (float64). Advisor
states and random feature maps are deliberately outside the trainable set.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .advisor import AdvisorState
from .errors import CheckpointError, ForwardError
from .kernel_attention import RandomFeatureMap
from .pointcloud import GroupedCloud

CHECKPOINT_MAGIC = b"C3DA"
CHECKPOINT_VERSION = 1

_SEED_INIT = 11
_SEED_MAP = 211


@dataclass
class ModelConfig:
    d: int = 64                 # token width
    m: int = 10                 # random feature count
    blocks: int = 4             # residual blocks, split encoder/decoder
    g: int = 32                 # points per group
    n_groups: int = 256
    alpha: float = 0.7
    beta: float = 0.7
    stage1_width: int = 128
    ff_ratio: int = 4
    lambda_stab: float = 1e-6
    exp_clamp: float = 30.0
    # attention projection init std = proj_scale / d. Keeps |k| ~ proj_scale
    # for layer-normed inputs; the advisor update is a contraction only while
    # beta * |phi(k)|^2 < 2, so the key scale must stay well under 1.
    proj_scale: float = 0.5
    kal_enabled: bool = True
    attention: str = "kaa"      # "kaa" or "linear" (advisor ablated)
    kaa_normalized: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if self.attention not in ("kaa", "linear"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TokenBatch:
    tokens: np.ndarray   # (n, d)
    centers: np.ndarray  # (n, 3)

    @property
    def n(self):
        return self.tokens.shape[0]


@dataclass
class ForwardResult:
    tokens: TokenBatch
    # per-layer (phi(K), V) value pairs, present in train mode only
    layer_kv: Optional[list[tuple[np.ndarray, np.ndarray]]] = None


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(repr=False)
    maps: list[RandomFeatureMap] = field(repr=False)
    advisors: list[AdvisorState] = field(repr=False)
    seed: int = 0

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(int(a.size) for a in self.arrays.values())


def _derive(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Draw fresh parameters; deterministic per (config, seed)."""
    rng = _derive(seed, _SEED_INIT)
    d, w1 = config.d, config.stage1_width
    hidden = config.ff_ratio * d
    proj_std = config.proj_scale / d

    arrays: dict[str, np.ndarray] = {}

    def draw(name, shape, std):
        arrays[name] = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)

    draw("emb.p1.w", (3, w1), np.sqrt(2.0 / 3.0))
    draw("emb.p1.b", (w1,), 0.0)
    draw("emb.p2.w", (w1, d), np.sqrt(2.0 / w1))
    draw("emb.p2.b", (d,), 0.0)
    draw("emb.pos1.w", (3, w1), np.sqrt(2.0 / 3.0))
    draw("emb.pos1.b", (w1,), 0.0)
    draw("emb.pos2.w", (w1, d), np.sqrt(2.0 / w1))
    draw("emb.pos2.b", (d,), 0.0)
    for gate in ("wq", "wk", "wv"):
        draw(f"emb.kal.{gate}", (d, d), proj_std)
    for i in range(config.blocks):
        arrays[f"blk{i}.ln1.g"] = np.ones(d)
        draw(f"blk{i}.ln1.b", (d,), 0.0)
        for gate in ("wq", "wk", "wv"):
            draw(f"blk{i}.attn.{gate}", (d, d), proj_std)
        arrays[f"blk{i}.ln2.g"] = np.ones(d)
        draw(f"blk{i}.ln2.b", (d,), 0.0)
        draw(f"blk{i}.ff.w1", (d, hidden), np.sqrt(2.0 / d))
        draw(f"blk{i}.ff.b1", (hidden,), 0.0)
        draw(f"blk{i}.ff.w2", (hidden, d), np.sqrt(2.0 / hidden))
        draw(f"blk{i}.ff.b2", (d,), 0.0)

    dt = config.np_dtype
    arrays = {k: v.astype(dt) for k, v in arrays.items()}

    maps = [
        RandomFeatureMap.draw(d, config.m, _map_seed(seed, layer))
        for layer in range(config.blocks + 1)
    ]
    advisors = [
        AdvisorState.zeros(d, config.m, config.alpha, config.beta)
        for _ in range(config.blocks)
    ]
    return ModelParams(config=config, arrays=arrays, maps=maps, advisors=advisors, seed=seed)


def _map_seed(seed: int, layer: int) -> int:
    ss = np.random.SeedSequence([int(seed), _SEED_MAP, layer])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Tape construction
# ---------------------------------------------------------------------------

def make_leaves(params: ModelParams, needs: bool) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, needs=needs) for k, v in params.arrays.items()}


def _c(value, dt):
    return ad.Tensor(np.asarray(value, dtype=dt))


def _phi_tape(x: ad.Tensor, fmap: RandomFeatureMap, clamp: float, dt) -> ad.Tensor:
    w_t = ad.Tensor(np.ascontiguousarray(fmap.projections_as(dt).T))
    z = ad.matmul(x, w_t)
    sq = ad.sumax(ad.mul(x, x), axis=-1, keepdims=True)
    logits = ad.sub(z, ad.mul(sq, _c(0.5, dt)))
    logits = ad.sub(logits, _c(0.5 * np.log(fmap.m), dt))
    logits = ad.clip(logits, -clamp, clamp)
    return ad.exp(logits)


def _layer_norm(x: ad.Tensor, gain: ad.Tensor, offset: ad.Tensor, dt) -> ad.Tensor:
    mu = ad.meanax(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.meanax(ad.mul(xc, xc), axis=-1, keepdims=True)
    xn = ad.div(xc, ad.sqrt(ad.add(var, _c(1e-5, dt))))
    return ad.add(ad.mul(xn, gain), offset)


def _linear_attention_tape(pq, pk, v, lam, dt):
    ksum = ad.sumax(pk, axis=1, keepdims=True)              # (B, 1, m)
    summary = ad.matmul(ad.transpose(pk, (0, 2, 1)), v)     # (B, m, d)
    num = ad.matmul(pq, summary)                            # (B, n, d)
    den = ad.matmul(pq, ad.transpose(ksum, (0, 2, 1)))      # (B, n, 1)
    return ad.div(num, ad.add(den, _c(lam, dt)))


def embed_tape(
    leaves: dict[str, ad.Tensor],
    params: ModelParams,
    groups: np.ndarray,   # (B, n, g, 3)
    centers: np.ndarray,  # (B, n, 3)
) -> ad.Tensor:
    """Group geometry -> token tensor (B, n, d)."""
    cfg = params.config
    dt = cfg.np_dtype
    B, n, g, _ = groups.shape

    flat = ad.Tensor(np.ascontiguousarray(groups.reshape(B * n * g, 3), dtype=dt))
    h = ad.gelu(ad.add(ad.matmul(flat, leaves["emb.p1.w"]), leaves["emb.p1.b"]))
    h = ad.gelu(ad.add(ad.matmul(h, leaves["emb.p2.w"]), leaves["emb.p2.b"]))
    pooled = ad.maxax(ad.reshape(h, (B * n, g, cfg.d)), axis=1)

    cflat = ad.Tensor(np.ascontiguousarray(centers.reshape(B * n, 3), dtype=dt))
    p = ad.gelu(ad.add(ad.matmul(cflat, leaves["emb.pos1.w"]), leaves["emb.pos1.b"]))
    p = ad.add(ad.matmul(p, leaves["emb.pos2.w"]), leaves["emb.pos2.b"])

    tok = ad.reshape(ad.add(pooled, p), (B, n, cfg.d))
    if cfg.kal_enabled:
        q = ad.matmul(tok, leaves["emb.kal.wq"])
        k = ad.matmul(tok, leaves["emb.kal.wk"])
        v = ad.matmul(tok, leaves["emb.kal.wv"])
        pq = _phi_tape(q, params.maps[0], cfg.exp_clamp, dt)
        pk = _phi_tape(k, params.maps[0], cfg.exp_clamp, dt)
        tok = ad.add(tok, _linear_attention_tape(pq, pk, v, cfg.lambda_stab, dt))
    if not np.isfinite(tok.data).all():
        raise ForwardError("non-finite activation", layer="embedder")
    return tok


def blocks_tape(
    x: ad.Tensor,
    leaves: dict[str, ad.Tensor],
    params: ModelParams,
    collect_kv: bool = False,
) -> tuple[ad.Tensor, Optional[list[tuple[np.ndarray, np.ndarray]]]]:
    """Encoder-decoder stack over a token tensor (B, n, d)."""
    cfg = params.config
    dt = cfg.np_dtype
    kv = [] if collect_kv else None
    for i in range(cfg.blocks):
        xn = _layer_norm(x, leaves[f"blk{i}.ln1.g"], leaves[f"blk{i}.ln1.b"], dt)
        q = ad.matmul(xn, leaves[f"blk{i}.attn.wq"])
        pq = _phi_tape(q, params.maps[i + 1], cfg.exp_clamp, dt)
        if cfg.attention == "kaa":
            s_t = ad.Tensor(np.ascontiguousarray(params.advisors[i].S.T.astype(dt)))
            attn = ad.matmul(pq, s_t)
            if cfg.kaa_normalized:
                z_col = ad.Tensor(params.advisors[i].z.astype(dt)[:, None])
                den = ad.add(ad.matmul(pq, z_col), _c(cfg.lambda_stab, dt))
                attn = ad.div(attn, den)
            if collect_kv:
                k = ad.matmul(xn, leaves[f"blk{i}.attn.wk"])
                v = ad.matmul(xn, leaves[f"blk{i}.attn.wv"])
                pk = _phi_tape(k, params.maps[i + 1], cfg.exp_clamp, dt)
                kv.append((pk.data, v.data))
        else:
            k = ad.matmul(xn, leaves[f"blk{i}.attn.wk"])
            v = ad.matmul(xn, leaves[f"blk{i}.attn.wv"])
            pk = _phi_tape(k, params.maps[i + 1], cfg.exp_clamp, dt)
            attn = _linear_attention_tape(pq, pk, v, cfg.lambda_stab, dt)
            if collect_kv:
                kv.append((pk.data, v.data))
        x = ad.add(x, attn)
        xn2 = _layer_norm(x, leaves[f"blk{i}.ln2.g"], leaves[f"blk{i}.ln2.b"], dt)
        f = ad.gelu(ad.add(ad.matmul(xn2, leaves[f"blk{i}.ff.w1"]), leaves[f"blk{i}.ff.b1"]))
        f = ad.add(ad.matmul(f, leaves[f"blk{i}.ff.w2"]), leaves[f"blk{i}.ff.b2"])
        x = ad.add(x, f)
        if not np.isfinite(x.data).all():
            raise ForwardError("non-finite activation", layer=f"block{i}")
    return x, kv


# ---------------------------------------------------------------------------
# Public single-cloud operations
# ---------------------------------------------------------------------------

def embed_groups(grouped: GroupedCloud, params: ModelParams) -> TokenBatch:
    """Turn grouped geometry into one TokenBatch (no gradient tracking)."""
    dt = params.config.np_dtype
    groups = grouped.groups[None].astype(dt)
    centers = grouped.centers[None].astype(dt)
    leaves = make_leaves(params, needs=False)
    tok = embed_tape(leaves, params, groups, centers)
    return TokenBatch(tokens=tok.data[0].copy(), centers=grouped.centers.copy())


def forward(tokens: TokenBatch, params: ModelParams, mode: str = "eval") -> ForwardResult:
    """Reconstruct a token batch through the encoder-decoder stack.

    Train mode also returns the per-layer (phi(K), V) values so the caller
    can feed the advisor updates after its optimizer step.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    dt = params.config.np_dtype
    x = ad.Tensor(tokens.tokens[None].astype(dt))
    leaves = make_leaves(params, needs=False)
    out, kv = blocks_tape(x, leaves, params, collect_kv=(mode == "train"))
    if kv is not None:
        kv = [(pk[0], v[0]) for pk, v in kv]  # drop the singleton batch axis
    return ForwardResult(
        tokens=TokenBatch(tokens=out.data[0].copy(), centers=tokens.centers),
        layer_kv=kv,
    )


def recon_loss(a: TokenBatch, b: TokenBatch) -> float:
    """Mean squared error over all n*d token entries."""
    if a.tokens.shape != b.tokens.shape:
        raise ValueError("token shapes differ")
    diff = a.tokens.astype(np.float64) - b.tokens.astype(np.float64)
    return float((diff * diff).mean())


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON header, raw little-endian arrays
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    path = Path(path)
    names = list(params.arrays.keys())
    blobs: list[np.ndarray] = []
    directory = []
    for name in names:
        arr = params.arrays[name]
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blobs.append(le)
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
    for i, adv in enumerate(params.advisors):
        for part, arr in (("S", adv.S), ("z", adv.z)):
            le = arr.astype("<f8", copy=False)
            blobs.append(le)
            directory.append(
                {"name": f"advisor{i}.{part}", "dtype": "<f8", "shape": list(arr.shape)}
            )
    header = {
        "config": asdict(params.config),
        "seed": params.seed,
        "map_seeds": [m.seed for m in params.maps],
        "advisors": [
            {"alpha": a.alpha, "beta": a.beta, "update_count": a.update_count}
            for a in params.advisors
        ],
        "arrays": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(np.ascontiguousarray(blob).tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0
        )
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})",
            offset=4,
        )
    if len(blob) < 12 + header_len:
        raise CheckpointError("truncated header", offset=len(blob))
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", offset=12)

    config = ModelConfig(**header["config"])
    offset = 12 + header_len
    loaded: dict[str, np.ndarray] = {}
    for rec in header["arrays"]:
        dtype = np.dtype(rec["dtype"])
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        nbytes = count * dtype.itemsize
        if len(blob) - offset < nbytes:
            raise CheckpointError(
                f"truncated array {rec['name']!r}: need {nbytes} bytes", offset=offset
            )
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        loaded[rec["name"]] = arr.reshape(rec["shape"]).copy()
        offset += nbytes

    arrays = {k: v for k, v in loaded.items() if not k.startswith("advisor")}
    advisors = []
    for i, meta in enumerate(header["advisors"]):
        advisors.append(
            AdvisorState(
                S=loaded[f"advisor{i}.S"],
                alpha=meta["alpha"],
                beta=meta["beta"],
                update_count=meta["update_count"],
                z=loaded[f"advisor{i}.z"],
            )
        )
    maps = [
        RandomFeatureMap.draw(config.d, config.m, s) for s in header["map_seeds"]
    ]
    return ModelParams(
        config=config,
        arrays=arrays,
        maps=maps,
        advisors=advisors,
        seed=header.get("seed", 0),
    )
