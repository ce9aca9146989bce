"""Decoder-only transformer over the grasp grammar, written directly in
numpy with an explicit backward pass.

The architecture mirrors the standard pre-norm GPT block (LayerNorm,
multi-head attention under the hybrid mask, SiLU MLP) at desk scale, plus
a small learned point-cloud encoder: farthest-point-sampled centroids
whose k-neighborhood offsets pass through a shared per-point transform
and max-pooling. Visual embeddings replace the placeholder token
embeddings at the pc span positions.

Training runs in float32; gradient checking switches the whole stack to
float64 via ``ModelConfig.dtype``. The SiLU activation is smooth, which
keeps central finite differences honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..errors import InsufficientPoints

_LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    n_visual_tokens: int = 16
    max_sequence_length: int = 160
    neighborhood_k: int = 32
    encoder_hidden: int = 32
    # optimization schedule
    learning_rate: float = 1e-3
    warmup_steps: int = 1000
    total_steps: int = 4000
    batch_size: int = 16
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 1e-10
    min_lr_ratio: float = 0.0
    loss_on_prompt: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_visual_tokens < 1:
            raise ValueError("n_visual_tokens must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class Batch:
    """One training/inference batch. ``target_mask`` marks the token
    positions whose prediction enters the loss (each predicted from the
    position before it)."""

    ids: np.ndarray  # (B, T) int64
    neigh: np.ndarray  # (B, M, k, 3) neighborhood offsets per centroid
    cents: np.ndarray  # (B, M, 3) centroid coordinates
    pc_start: np.ndarray  # (B,) start of the pc span
    attn_mask: np.ndarray  # (B, T, T) bool
    target_mask: np.ndarray  # (B, T) bool


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Indices of m farthest-point-sampled points. Starts at index 0;
    distance ties resolve to the lowest index (argmax takes the first
    maximum), so the selection is fully deterministic."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < m:
        raise InsufficientPoints(f"{n} points < {m} centroids")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    d = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, m):
        j = int(np.argmax(d))
        chosen[i] = j
        d = np.minimum(d, np.linalg.norm(points - points[j], axis=1))
    return chosen


def point_encoder_features(points, n_centroids: int, k: int):
    """Geometry-only encoder inputs, precomputable per cloud: FPS centroid
    coordinates (M, 3) and neighborhood offsets (M, k, 3) of the k nearest
    points around each centroid (sorted by distance, ties by index)."""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, points.shape[0])
    idx = farthest_point_sample(points, n_centroids)
    cents = points[idx]
    neigh = np.empty((n_centroids, k, 3))
    for i, c in enumerate(cents):
        d2 = np.einsum("nd,nd->n", points - c, points - c)
        nn = np.argsort(d2, kind="stable")[:k]
        neigh[i] = points[nn] - c
    return cents, neigh


class ContactReasoningModel:
    """Parameter container plus forward/backward passes."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else self._init(seed)

    # -- parameters ---------------------------------------------------------

    def _init(self, seed: int) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        d, h = cfg.d_model, cfg.encoder_hidden
        std = 0.02
        res_std = std / np.sqrt(2.0 * cfg.n_layers)

        def normal(shape, s=std):
            return rng.normal(0.0, s, size=shape).astype(dt)

        p = {
            "tok_emb": normal((cfg.vocab_size, d)),
            "pos_emb": normal((cfg.max_sequence_length, d), 0.01),
            "lnf.g": np.ones(d, dtype=dt),
            "lnf.b": np.zeros(d, dtype=dt),
            "head.w": normal((d, cfg.vocab_size)),
            "head.b": np.zeros(cfg.vocab_size, dtype=dt),
            "penc.w1": normal((3, h)),
            "penc.b1": np.zeros(h, dtype=dt),
            "penc.w2": normal((h + 3, d)),
            "penc.b2": np.zeros(d, dtype=dt),
        }
        for i in range(cfg.n_layers):
            p[f"l{i}.ln1.g"] = np.ones(d, dtype=dt)
            p[f"l{i}.ln1.b"] = np.zeros(d, dtype=dt)
            p[f"l{i}.attn.wqkv"] = normal((d, 3 * d))
            p[f"l{i}.attn.bqkv"] = np.zeros(3 * d, dtype=dt)
            p[f"l{i}.attn.wo"] = normal((d, d), res_std)
            p[f"l{i}.attn.bo"] = np.zeros(d, dtype=dt)
            p[f"l{i}.ln2.g"] = np.ones(d, dtype=dt)
            p[f"l{i}.ln2.b"] = np.zeros(d, dtype=dt)
            p[f"l{i}.mlp.w1"] = normal((d, 4 * d))
            p[f"l{i}.mlp.b1"] = np.zeros(4 * d, dtype=dt)
            p[f"l{i}.mlp.w2"] = normal((4 * d, d), res_std)
            p[f"l{i}.mlp.b2"] = np.zeros(d, dtype=dt)
        return p

    def parameter_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def reference_shapes(self) -> dict:
        return {k: v.shape for k, v in self.params.items()}

    # -- layers -------------------------------------------------------------

    @staticmethod
    def _ln_fwd(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LN_EPS)
        xhat = xc * inv
        return xhat * g + b, (xhat, inv)

    @staticmethod
    def _ln_bwd(dy, cache, g):
        xhat, inv = cache
        dg = (dy * xhat).sum(axis=(0, 1))
        db = dy.sum(axis=(0, 1))
        dxhat = dy * g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dg, db

    def _encode_points(self, neigh, cents):
        p = self.params
        z1 = neigh @ p["penc.w1"] + p["penc.b1"]  # (B,M,k,h)
        a1 = silu(z1)
        arg = a1.argmax(axis=2)  # (B,M,h)
        pool = np.take_along_axis(a1, arg[:, :, None, :], axis=2)[:, :, 0, :]
        pin = np.concatenate([pool, cents], axis=-1)  # (B,M,h+3)
        vis = pin @ p["penc.w2"] + p["penc.b2"]  # (B,M,d)
        return vis, (z1, arg, pin, neigh)

    def _encode_points_bwd(self, dvis, cache, grads):
        p = self.params
        z1, arg, pin, neigh = cache
        h = self.cfg.encoder_hidden
        grads["penc.w2"] += pin.reshape(-1, pin.shape[-1]).T @ \
            dvis.reshape(-1, dvis.shape[-1])
        grads["penc.b2"] += dvis.sum(axis=(0, 1))
        dpin = dvis @ p["penc.w2"].T
        dpool = dpin[..., :h]  # (B,M,h)
        da1 = np.zeros_like(z1)
        np.put_along_axis(da1, arg[:, :, None, :], dpool[:, :, None, :],
                          axis=2)
        dz1 = da1 * silu_grad(z1)
        grads["penc.w1"] += neigh.reshape(-1, 3).T @ \
            dz1.reshape(-1, dz1.shape[-1])
        grads["penc.b1"] += dz1.sum(axis=(0, 1, 2))

    # -- forward ------------------------------------------------------------

    def trunk(self, batch: Batch, want_cache: bool = False):
        """Transformer trunk up to the final LayerNorm: returns the
        (B, T, d) features and, with ``want_cache``, every intermediate
        the backward pass needs."""
        cfg, p = self.cfg, self.params
        dt = cfg.np_dtype
        ids = batch.ids
        b, t = ids.shape
        if t > cfg.max_sequence_length:
            raise ValueError(f"sequence length {t} exceeds maximum "
                             f"{cfg.max_sequence_length}")
        m = cfg.n_visual_tokens
        neigh = batch.neigh if batch.neigh.dtype == dt \
            else batch.neigh.astype(dt)
        cents = batch.cents if batch.cents.dtype == dt \
            else batch.cents.astype(dt)

        vis, enc_cache = self._encode_points(neigh, cents)
        emb = p["tok_emb"][ids]  # fancy indexing copies
        rows = np.arange(b)[:, None]
        cols = batch.pc_start[:, None] + np.arange(m)[None, :]
        emb[rows, cols] = vis
        x = emb + p["pos_emb"][:t]

        # additive attention mask: 0 where attending, -inf where masked
        madd = np.zeros(batch.attn_mask.shape, dtype=dt)
        madd[~batch.attn_mask] = -np.inf
        madd = madd[:, None, :, :]  # (B,1,T,T)
        nh, dh = cfg.n_heads, cfg.head_dim
        scale = dt(1.0 / np.sqrt(dh))

        layer_caches = []
        for i in range(cfg.n_layers):
            h1, ln1_cache = self._ln_fwd(x, p[f"l{i}.ln1.g"],
                                         p[f"l{i}.ln1.b"])
            qkv = h1 @ p[f"l{i}.attn.wqkv"] + p[f"l{i}.attn.bqkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            q = q.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            k = k.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            v = v.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2)
            s *= scale
            s += madd
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            prob = s  # reuse the scores buffer
            o = prob @ v  # (B,H,T,dh)
            oc = o.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
            ao = oc @ p[f"l{i}.attn.wo"] + p[f"l{i}.attn.bo"]
            x2 = x + ao
            h2, ln2_cache = self._ln_fwd(x2, p[f"l{i}.ln2.g"],
                                         p[f"l{i}.ln2.b"])
            z1 = h2 @ p[f"l{i}.mlp.w1"] + p[f"l{i}.mlp.b1"]
            sig = 1.0 / (1.0 + np.exp(-z1))
            a = z1 * sig
            z2 = a @ p[f"l{i}.mlp.w2"] + p[f"l{i}.mlp.b2"]
            x_next = x2 + z2
            if want_cache:
                layer_caches.append((x, h1, ln1_cache, q, k, v, prob, oc,
                                     x2, h2, ln2_cache, z1, sig, a))
            x = x_next

        xf, lnf_cache = self._ln_fwd(x, p["lnf.g"], p["lnf.b"])
        if not want_cache:
            return xf, None
        return xf, {
            "enc": enc_cache, "emb_rows": rows, "emb_cols": cols,
            "ids": ids, "layers": layer_caches, "xf": xf,
            "lnf": lnf_cache, "t": t,
        }

    def forward(self, batch: Batch, want_cache: bool = False):
        """Full token logits (B, T, V). Generation and probe tests only;
        training uses the row-sparse path in loss_and_optionally_grads."""
        xf, cache = self.trunk(batch, want_cache)
        logits = xf @ self.params["head.w"] + self.params["head.b"]
        return logits, cache

    def logits_last(self, batch: Batch) -> np.ndarray:
        """Logits of the final position only (autoregressive decoding)."""
        xf, _ = self.trunk(batch)
        return xf[:, -1] @ self.params["head.w"] + self.params["head.b"]

    def loss_and_optionally_grads(self, batch: Batch,
                                  want_grads: bool = True):
        """Mean next-token cross-entropy over ``target_mask`` positions,
        and (optionally) gradients for every parameter."""
        cfg, p = self.cfg, self.params
        xf, cache = self.trunk(batch, want_cache=want_grads)
        b, t, d = xf.shape

        tb, tt = np.nonzero(batch.target_mask)
        if tb.size == 0:
            loss = 0.0
            if not want_grads:
                return loss, None
            return loss, {k: np.zeros_like(v) for k, v in p.items()}
        if np.any(tt == 0):
            raise ValueError("target position 0 has no predictor")
        pb, pt = tb, tt - 1  # predictor positions
        xf_rows = xf[pb, pt]  # (n, d)
        rows = xf_rows @ p["head.w"] + p["head.b"]  # (n, V)
        rows -= rows.max(axis=1, keepdims=True)
        ex = np.exp(rows)
        denom = ex.sum(axis=1, keepdims=True)
        tgt = batch.ids[tb, tt]
        n = rows.shape[0]
        nll = np.log(denom[:, 0]) - rows[np.arange(n), tgt]
        loss = float(nll.mean())
        if not want_grads:
            return loss, None

        dt = cfg.np_dtype
        soft = ex / denom
        soft[np.arange(n), tgt] -= 1.0
        soft /= dt(n)

        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["head.w"] += xf_rows.T @ soft
        grads["head.b"] += soft.sum(axis=0)
        dxf = np.zeros_like(xf)
        dxf[pb, pt] = soft @ p["head.w"].T
        dx, dg, db = self._ln_bwd(dxf, cache["lnf"], p["lnf.g"])
        grads["lnf.g"] += dg
        grads["lnf.b"] += db

        nh, dh = cfg.n_heads, cfg.head_dim
        scale = dt(1.0 / np.sqrt(dh))
        for i in reversed(range(cfg.n_layers)):
            (x_in, h1, ln1_cache, q, k, v, prob, oc, x2, h2, ln2_cache,
             z1, sig, a) = cache["layers"][i]
            # MLP branch
            dz2 = dx
            grads[f"l{i}.mlp.w2"] += a.reshape(-1, a.shape[-1]).T @ \
                dz2.reshape(-1, cfg.d_model)
            grads[f"l{i}.mlp.b2"] += dz2.sum(axis=(0, 1))
            da = dz2 @ p[f"l{i}.mlp.w2"].T
            dz1 = da * (sig * (1.0 + z1 * (1.0 - sig)))
            grads[f"l{i}.mlp.w1"] += h2.reshape(-1, cfg.d_model).T @ \
                dz1.reshape(-1, dz1.shape[-1])
            grads[f"l{i}.mlp.b1"] += dz1.sum(axis=(0, 1))
            dh2 = dz1 @ p[f"l{i}.mlp.w1"].T
            dx2_ln, dg, db = self._ln_bwd(dh2, ln2_cache, p[f"l{i}.ln2.g"])
            grads[f"l{i}.ln2.g"] += dg
            grads[f"l{i}.ln2.b"] += db
            dx2 = dx + dx2_ln
            # attention branch
            dao = dx2
            grads[f"l{i}.attn.wo"] += oc.reshape(-1, cfg.d_model).T @ \
                dao.reshape(-1, cfg.d_model)
            grads[f"l{i}.attn.bo"] += dao.sum(axis=(0, 1))
            doc = dao @ p[f"l{i}.attn.wo"].T
            do = doc.reshape(x_in.shape[0], -1, nh, dh).transpose(0, 2, 1, 3)
            dprob = do @ v.transpose(0, 1, 3, 2)
            dv = prob.transpose(0, 1, 3, 2) @ do
            ds = prob * (dprob
                         - (dprob * prob).sum(axis=-1, keepdims=True))
            dq = (ds @ k) * scale
            dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
            bsz, tlen = x_in.shape[0], x_in.shape[1]

            def merge(h_tensor):
                return h_tensor.transpose(0, 2, 1, 3).reshape(bsz, tlen, -1)

            dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
            grads[f"l{i}.attn.wqkv"] += h1.reshape(-1, cfg.d_model).T @ \
                dqkv.reshape(-1, 3 * cfg.d_model)
            grads[f"l{i}.attn.bqkv"] += dqkv.sum(axis=(0, 1))
            dh1 = dqkv @ p[f"l{i}.attn.wqkv"].T
            dx_ln, dg, db = self._ln_bwd(dh1, ln1_cache, p[f"l{i}.ln1.g"])
            grads[f"l{i}.ln1.g"] += dg
            grads[f"l{i}.ln1.b"] += db
            dx = dx2 + dx_ln

        # embeddings: dx is the gradient at (tok/vis emb + pos emb)
        grads["pos_emb"][:cache["t"]] += dx.sum(axis=0)
        rows_idx, cols_idx = cache["emb_rows"], cache["emb_cols"]
        dvis = dx[rows_idx, cols_idx].copy()
        demb = dx
        demb[rows_idx, cols_idx] = 0.0  # pc positions carry no token grad
        ids_flat = cache["ids"].ravel()
        demb_flat = demb.reshape(-1, cfg.d_model)
        gtok = grads["tok_emb"]
        for j in range(cfg.d_model):  # bincount beats ufunc.at here
            gtok[:, j] += np.bincount(ids_flat, weights=demb_flat[:, j],
                                      minlength=cfg.vocab_size)
        self._encode_points_bwd(dvis, cache["enc"], grads)
        return loss, grads

    def loss(self, batch: Batch) -> float:
        return self.loss_and_optionally_grads(batch, want_grads=False)[0]
