"""Neural net layers with hand-written backward passes.

Every layer caches what its backward pass needs during forward; calling
backward before forward raises StateError. There is no general autograd: the
chain rule is spelled out per layer, which keeps gradients auditable at this
scale and lets the finite-difference checker exercise each layer in isolation.

Conventions:
  - activations and weights are float32,
  - inputs may carry any number of leading batch dims; the last axis is the
    feature axis,
  - backward(d_out) returns d_input and accumulates parameter gradients as a
    side effect (skipping frozen parameters).
"""

from __future__ import annotations

import numpy as np

from sketchlab.errors import ConfigError, DimensionError, StateError, ValidationError
from sketchlab.params import Parameter

_SQRT_2_OVER_PI = np.float32(0.7978845608028654)
_GELU_CUBIC = np.float32(0.044715)


def _as_activation(x: np.ndarray) -> np.ndarray:
    """Cast to float32 unless the caller passed float64.

    Production code feeds float32 throughout. The finite-difference checker
    deliberately feeds float64 activations so that numeric probes are not
    drowned by float32 re-quantization noise; weights stay float32 either way
    (their rounding is identical in both probe evaluations and cancels).
    """
    x = np.asarray(x)
    if x.dtype == np.float64:
        return x
    return x.astype(np.float32, copy=False)

# Additive mask value for attention scores. exp(-1e9 - max) underflows to an
# exact 0.0 after max-subtraction, so masked keys contribute nothing at all and
# padded batching reproduces per-item results bitwise.
_MASK_VALUE = np.float32(-1e9)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = _as_activation(x)
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d gelu / dx evaluated at x (same tanh approximation as gelu)."""
    x = _as_activation(x)
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x * x * x)
    t = np.tanh(inner)
    d_inner = _SQRT_2_OVER_PI * (np.float32(1.0) + np.float32(3.0) * _GELU_CUBIC * x * x)
    return np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * (np.float32(1.0) - t * t) * d_inner


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction) along `axis`."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_grad(probs: np.ndarray, d_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backward through softmax given its output `probs` and upstream d_probs."""
    inner = np.sum(d_probs * probs, axis=axis, keepdims=True)
    return (d_probs - inner) * probs


class Linear:
    """y = x @ W.T + b, with an optional attached low-rank adapter.

    When an adapter is attached the effective weight is W + (alpha/r) * B @ A;
    the forward uses the cheap two-step low-rank path, which is bitwise equal
    to the base path while B is zero.
    """

    def __init__(self, in_dim: int, out_dim: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None, name: str = "linear"):
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"linear dims must be positive, got {in_dim}x{out_dim}")
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, in_dim ** -0.5, size=(out_dim, in_dim))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias") if bias else None
        self.adapter = None  # set by lora.inject
        self.name = name
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        ps = [self.weight]
        if self.bias is not None:
            ps.append(self.bias)
        return ps

    def effective_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.weight.value
        return self.weight.value + self.adapter.delta()

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_activation(x)
        if x.ndim < 1 or x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"{self.name}: input shape {x.shape} does not match weight shape "
                f"{self.weight.shape} (expected last axis {self.in_dim})"
            )
        self._x = x
        y = x @ self.weight.value.T
        if self.adapter is not None:
            a = self.adapter
            y = y + np.float32(a.scaling) * ((x @ a.A.value.T) @ a.B.value.T)
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError(f"{self.name}: backward called before forward")
        x = self._x
        if d_out.shape != x.shape[:-1] + (self.out_dim,):
            raise DimensionError(
                f"{self.name}: upstream gradient shape {d_out.shape} does not match "
                f"output shape {x.shape[:-1] + (self.out_dim,)}"
            )
        x2 = x.reshape(-1, self.in_dim)
        d2 = _as_activation(d_out).reshape(-1, self.out_dim)
        self.weight.accumulate(d2.T @ x2)
        if self.bias is not None:
            self.bias.accumulate(d2.sum(axis=0))
        d_x = d2 @ self.weight.value
        if self.adapter is not None:
            a = self.adapter
            s = np.float32(a.scaling)
            u = x2 @ a.A.value.T                      # [N, r]
            a.B.accumulate(s * (d2.T @ u))            # [out, r]
            d_u = d2 @ a.B.value                      # [N, r]
            a.A.accumulate(s * (d_u.T @ x2))          # [r, in]
            d_x = d_x + s * (d_u @ a.A.value)
        return d_x.reshape(x.shape)


class LayerNorm:
    """Layer normalization over the last axis with learned scale/shift."""

    def __init__(self, dim: int, *, eps: float = 1e-5, name: str = "ln"):
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.eps = np.float32(eps)
        self.name = name
        self._x_hat: np.ndarray | None = None
        self._inv_std: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _as_activation(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(
                f"{self.name}: input shape {x.shape} does not match dim {self.dim}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._x_hat = x_hat
        self._inv_std = inv_std
        return self.gamma.value * x_hat + self.beta.value

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._x_hat is None:
            raise StateError(f"{self.name}: backward called before forward")
        x_hat, inv_std = self._x_hat, self._inv_std
        d_out = _as_activation(d_out)
        flat = (-1, self.dim)
        self.beta.accumulate(d_out.reshape(flat).sum(axis=0))
        self.gamma.accumulate((d_out * x_hat).reshape(flat).sum(axis=0))
        d_hat = d_out * self.gamma.value
        # dx = (d_hat - mean(d_hat) - x_hat * mean(d_hat * x_hat)) / std
        m1 = d_hat.mean(axis=-1, keepdims=True)
        m2 = (d_hat * x_hat).mean(axis=-1, keepdims=True)
        return (d_hat - m1 - x_hat * m2) * inv_std


class TokenEmbedding:
    """Lookup table for token ids; backward scatter-adds into the table."""

    def __init__(self, vocab_size: int, dim: int, *,
                 rng: np.random.Generator | None = None, name: str = "tok_emb"):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, 0.02, size=(vocab_size, dim)), f"{name}.weight")
        self.name = name
        self._ids: np.ndarray | None = None

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.weight]

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValidationError(
                f"{self.name}: token id out of range [0, {self.vocab_size})"
            )
        self._ids = ids
        return self.weight.value[ids]

    def backward(self, d_out: np.ndarray) -> None:
        if self._ids is None:
            raise StateError(f"{self.name}: backward called before forward")
        if self.weight.frozen:
            return
        flat_ids = self._ids.reshape(-1)
        flat_d = np.asarray(d_out, dtype=np.float32).reshape(-1, self.dim)
        np.add.at(self.weight.grad, flat_ids, flat_d)


class MultiHeadAttention:
    """Multi-head scaled dot-product attention (self or cross).

    forward takes [L, d] or [B, L, d]; in "self" mode kv_in must be the query
    input itself (or omitted). key_mask, when given, is a boolean [B, Lk] array
    marking real (unpadded) key positions.
    """

    def __init__(self, model_dim: int, num_heads: int, *, mode: str = "self",
                 rng: np.random.Generator | None = None, name: str = "attn"):
        if mode not in ("self", "cross"):
            raise ConfigError(f"attention mode must be 'self' or 'cross', got {mode!r}")
        if model_dim % num_heads != 0:
            raise ConfigError(
                f"model_dim {model_dim} is not divisible by num_heads {num_heads}"
            )
        rng = rng or np.random.default_rng(0)
        self.mode = mode
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.model_dim = model_dim
        self.name = name
        # Projections are bias-free. A key-projection bias shifts every score
        # of a query by the same amount, which softmax cancels exactly, so its
        # gradient is structurally zero and finite differences see only noise.
        self.q_proj = Linear(model_dim, model_dim, bias=False, rng=rng, name=f"{name}.q_proj")
        self.k_proj = Linear(model_dim, model_dim, bias=False, rng=rng, name=f"{name}.k_proj")
        self.v_proj = Linear(model_dim, model_dim, bias=False, rng=rng, name=f"{name}.v_proj")
        self.o_proj = Linear(model_dim, model_dim, bias=False, rng=rng, name=f"{name}.o_proj")
        self._cache: dict | None = None
        self.last_probs: np.ndarray | None = None  # [B, h, Lq, Lk], for inspection

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.o_proj):
            ps.extend(lin.parameters())
        return ps

    def projections(self) -> dict[str, Linear]:
        return {"q": self.q_proj, "k": self.k_proj, "v": self.v_proj, "o": self.o_proj}

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, l, _ = x.shape
        return x.reshape(b, l, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, l, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, l, self.model_dim)

    def forward(self, q_in: np.ndarray, kv_in: np.ndarray | None = None,
                key_mask: np.ndarray | None = None) -> np.ndarray:
        q_in = _as_activation(q_in)
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = q_in[None]
            if kv_in is not None and np.asarray(kv_in).ndim == 2:
                kv_in = _as_activation(kv_in)[None]
        if self.mode == "self":
            if kv_in is not None and kv_in is not q_in:
                kv = _as_activation(kv_in)
                if kv.shape != q_in.shape or not np.array_equal(kv, q_in):
                    raise ValidationError(
                        f"{self.name}: self-attention requires kv_in to be the query input"
                    )
            kv_in = q_in
        else:
            if kv_in is None:
                raise ValidationError(f"{self.name}: cross-attention requires kv_in")
            kv_in = _as_activation(kv_in)
        if q_in.ndim != 3 or kv_in.ndim != 3:
            raise DimensionError(
                f"{self.name}: expected [L, d] or [B, L, d] inputs, got "
                f"{q_in.shape} and {kv_in.shape}"
            )
        if q_in.shape[-1] != self.model_dim or kv_in.shape[-1] != self.model_dim:
            raise DimensionError(
                f"{self.name}: feature dim of inputs {q_in.shape} / {kv_in.shape} "
                f"does not match model_dim {self.model_dim}"
            )
        if kv_in.shape[1] == 0:
            raise ValidationError(f"{self.name}: attention over an empty key sequence")
        if q_in.shape[0] != kv_in.shape[0]:
            raise DimensionError(
                f"{self.name}: batch mismatch {q_in.shape} vs {kv_in.shape}"
            )

        qh = self._split(self.q_proj(q_in))           # [B, h, Lq, hd]
        kh = self._split(self.k_proj(kv_in))          # [B, h, Lk, hd]
        vh = self._split(self.v_proj(kv_in))
        scale = np.float32(1.0 / np.sqrt(self.head_dim))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (kv_in.shape[0], kv_in.shape[1]):
                raise DimensionError(
                    f"{self.name}: key_mask shape {key_mask.shape} does not match "
                    f"key sequence shape {kv_in.shape[:2]}"
                )
            scores = np.where(key_mask[:, None, None, :], scores, _MASK_VALUE)
        probs = softmax(scores, axis=-1).astype(scores.dtype, copy=False)
        ctx = probs @ vh                              # [B, h, Lq, hd]
        out = self.o_proj(self._merge(ctx))
        self._cache = {
            "qh": qh, "kh": kh, "vh": vh, "probs": probs,
            "scale": scale, "squeeze": squeeze,
        }
        self.last_probs = probs
        return out[0] if squeeze else out

    def __call__(self, q_in, kv_in=None, key_mask=None):
        return self.forward(q_in, kv_in, key_mask)

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d_q_in, d_kv_in). In self mode the caller adds them."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        c = self._cache
        d_out = _as_activation(d_out)
        if c["squeeze"] and d_out.ndim == 2:
            d_out = d_out[None]
        d_ctx = self._split(self.o_proj.backward(d_out))
        probs, vh, qh, kh, scale = c["probs"], c["vh"], c["qh"], c["kh"], c["scale"]
        d_probs = d_ctx @ vh.transpose(0, 1, 3, 2)
        d_vh = probs.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = softmax_grad(probs, d_probs, axis=-1)
        d_qh = (d_scores @ kh) * scale
        d_kh = (d_scores.transpose(0, 1, 3, 2) @ qh) * scale
        d_q_in = self.q_proj.backward(self._merge(d_qh))
        d_kv = self.k_proj.backward(self._merge(d_kh)) + self.v_proj.backward(self._merge(d_vh))
        if c["squeeze"]:
            return d_q_in[0], d_kv[0]
        return d_q_in, d_kv


class TransformerBlock:
    """Pre-LN transformer block: attention + GELU MLP, both with residuals.

    mode "self": x = x + attn(ln1(x)); mode "cross": x = x + attn(ln1(x),
    ln_kv(kv)). Either way x = x + mlp(ln2(x)) afterwards.
    """

    def __init__(self, model_dim: int, num_heads: int, *, mode: str = "self",
                 mlp_ratio: int = 4, rng: np.random.Generator | None = None,
                 name: str = "block"):
        rng = rng or np.random.default_rng(0)
        self.mode = mode
        self.name = name
        self.ln1 = LayerNorm(model_dim, name=f"{name}.ln1")
        self.attn = MultiHeadAttention(model_dim, num_heads, mode=mode, rng=rng,
                                       name=f"{name}.attn")
        self.ln_kv = LayerNorm(model_dim, name=f"{name}.ln_kv") if mode == "cross" else None
        self.ln2 = LayerNorm(model_dim, name=f"{name}.ln2")
        hidden = model_dim * mlp_ratio
        self.fc1 = Linear(model_dim, hidden, rng=rng, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, model_dim, rng=rng, name=f"{name}.fc2")
        self._mlp_pre: np.ndarray | None = None

    def parameters(self) -> list[Parameter]:
        ps = self.ln1.parameters() + self.attn.parameters()
        if self.ln_kv is not None:
            ps += self.ln_kv.parameters()
        ps += self.ln2.parameters() + self.fc1.parameters() + self.fc2.parameters()
        return ps

    def forward(self, x: np.ndarray, kv: np.ndarray | None = None,
                key_mask: np.ndarray | None = None) -> np.ndarray:
        x = _as_activation(x)
        a = self.ln1(x)
        if self.mode == "self":
            att = self.attn(a, key_mask=key_mask)
        else:
            if kv is None:
                raise ValidationError(f"{self.name}: cross block requires kv input")
            att = self.attn(a, self.ln_kv(_as_activation(kv)), key_mask=key_mask)
        h = x + att
        m = self.ln2(h)
        pre = self.fc1(m)
        self._mlp_pre = pre
        return h + self.fc2(gelu(pre))

    def __call__(self, x, kv=None, key_mask=None):
        return self.forward(x, kv, key_mask)

    def backward(self, d_out: np.ndarray):
        """Self mode returns d_x; cross mode returns (d_x, d_kv)."""
        if self._mlp_pre is None:
            raise StateError(f"{self.name}: backward called before forward")
        d_out = _as_activation(d_out)
        d_pre = self.fc2.backward(d_out) * gelu_grad(self._mlp_pre)
        d_h = d_out + self.ln2.backward(self.fc1.backward(d_pre))
        d_q, d_kv_norm = self.attn.backward(d_h)
        if self.mode == "self":
            return d_h + self.ln1.backward(d_q + d_kv_norm)
        d_x = d_h + self.ln1.backward(d_q)
        d_kv = self.ln_kv.backward(d_kv_norm)
        return d_x, d_kv


def linear_forward(layer: Linear, x: np.ndarray) -> np.ndarray:
    """Functional wrapper over Linear.forward (single-op surface)."""
    return layer.forward(x)


def attention_forward(block: MultiHeadAttention, q_in: np.ndarray,
                      kv_in: np.ndarray | None = None) -> np.ndarray:
    """Functional wrapper over MultiHeadAttention.forward for [L, d] inputs."""
    return block.forward(q_in, kv_in)
