"""Layer-wise joint learning of codebooks and soft mappings.

For one layer with reference weights ``W``, features ``X`` from the reference
model and ``X_tilde`` from the partially compressed model, the objective is

    mean((act(W_tilde X_tilde) - act(W X))**2)       reconstruction
  + mean((W_tilde - W)**2)                             weight fidelity
  + lam * mean(1 - |2 p - 1|**beta)                    hardness (after warmup)

where ``p = softmax(logits)`` over each weight's codebook and ``W_tilde`` is
the soft reconstruction ``scale * sum_j p_j C_j``.

Codebook gradients are exact. Mapping gradients come in two flavours: the
exact chain rule (``UpdateRule.NAIVE``), whose weight on candidate j grows
with ``|C_j - C_assigned|``, and the proximal rule (``UpdateRule.PROXIMAL``)
which replaces the codebook factor by an inverse-distance weight so updates
favour the nearest codewords.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .model_io import LinearLayer, activate, activate_grad
from .reorder import CodebookSet, HardMapping

TRACE_FIELDS = ("step", "total", "recon", "l1", "l2", "beta")


class NumericError(ArithmeticError):
    """Non-finite loss or divergence during layer optimization."""

    def __init__(self, message: str, trace: "Trace | None" = None):
        super().__init__(message)
        self.trace = trace


class UpdateRule(str, enum.Enum):
    CODEBOOK = "codebook"  # learn C only, mapping frozen at its hard assignment
    NAIVE = "naive"  # learn C and I with the exact chain rule
    PROXIMAL = "proximal"  # learn C and I with the inverse-distance rule


@dataclass(frozen=True)
class Schedule:
    iterations: int = 10_000
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_fraction: float = 0.2
    lam: float = 0.01
    lr_codebook: float = 1e-4
    lr_mapping: float = 1e-3
    seed: int = 12345
    init_logit: float = 1.0
    batch_size: int | None = None
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.iterations)

    def regularized(self, step: int) -> bool:
        return step >= self.warmup_steps

    def beta(self, step: int) -> float:
        """Hardness exponent: flat during warmup, then linear to ``beta_end``."""
        w = self.warmup_steps
        if step < w:
            return self.beta_start
        span = max(self.iterations - w, 1)
        frac = min((step - w) / span, 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * frac


@dataclass
class SoftMapping:
    logits: np.ndarray  # (n_o, n_i, codebook_size)

    @classmethod
    def from_hard(cls, mapping: HardMapping, codebook_size: int, scale: float = 4.0) -> "SoftMapping":
        idx = np.asarray(mapping.indices)
        logits = np.zeros(idx.shape + (codebook_size,))
        np.put_along_axis(logits, idx[..., None], scale, axis=-1)
        return cls(logits)

    @property
    def flat(self) -> np.ndarray:
        """The (n_o * n_i) x codebook_size view."""
        return self.logits.reshape(-1, self.logits.shape[-1])

    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)

    def argmax(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)

    def one_hot(self) -> np.ndarray:
        q = self.logits.shape[-1]
        return (self.argmax()[..., None] == np.arange(q)).astype(np.float64)

    def copy(self) -> "SoftMapping":
        return SoftMapping(self.logits.copy())


@dataclass
class Trace:
    rows: list[tuple] = field(default_factory=list)

    def append(self, step, total, parts, beta):
        self.rows.append((step, total, parts["recon"], parts["l1"], parts["l2"], beta))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self, fh=None) -> str | None:
        out = io.StringIO() if fh is None else fh
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for r in self.rows:
            writer.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return out.getvalue() if fh is None else None


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _weighted_codewords(cbs: CodebookSet) -> np.ndarray:
    """Per-row codebook, (n_o, codebook_size)."""
    return cbs.codebooks[cbs.row_codebook()]


def soft_reconstruct(cbs: CodebookSet, mapping: SoftMapping | np.ndarray) -> np.ndarray:
    """Expected weights under the soft assignment. Accepts logits or probabilities."""
    p = mapping.probabilities() if isinstance(mapping, SoftMapping) else np.asarray(mapping)
    rows = _weighted_codewords(cbs)
    return np.einsum("oiq,oq->oi", p, rows) * cbs.row_scale()[:, None]


def hardness_penalty(p: np.ndarray, beta: float) -> np.ndarray:
    """Elementwise ``1 - |2p - 1|**beta``; zero exactly at p in {0, 1}."""
    return 1.0 - np.abs(2.0 * p - 1.0) ** beta


def _hardness_grad_logits(p: np.ndarray, beta: float) -> np.ndarray:
    """d mean(hardness_penalty) / d logits through the softmax Jacobian."""
    t = 2.0 * p - 1.0
    # np.sign(0) = 0 gives the zero subgradient at p = 0.5
    dp = -2.0 * beta * np.abs(t) ** (beta - 1.0) * np.sign(t) / p.size
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


@dataclass
class _Forward:
    p: np.ndarray
    w_tilde: np.ndarray
    z: np.ndarray
    out: np.ndarray
    parts: dict
    total: float


def _forward(cbs, p, x_tilde, target, layer: LinearLayer, w_ref, lam_eff, beta) -> _Forward:
    w_tilde = soft_reconstruct(cbs, p)
    z = x_tilde @ w_tilde.T
    if layer.bias is not None:
        z = z + layer.bias.astype(np.float64)
    out = activate(z, layer.activation)
    recon = float(np.mean((out - target) ** 2))
    l1 = float(np.mean((w_tilde - w_ref) ** 2))
    l2 = float(np.mean(hardness_penalty(p, beta)))
    total = recon + l1 + lam_eff * l2
    return _Forward(p, w_tilde, z, out, {"recon": recon, "l1": l1, "l2": l2}, total)


def _upstream(fw: _Forward, x_tilde, target, layer: LinearLayer, w_ref) -> np.ndarray:
    """d(recon + l1) / d W_tilde, shape (n_o, n_i)."""
    d_out = 2.0 * (fw.out - target) / fw.out.size
    d_z = d_out * activate_grad(fw.z, layer.activation)
    return d_z.T @ x_tilde + 2.0 * (fw.w_tilde - w_ref) / w_ref.size


def upstream_gradient(cbs: CodebookSet, mapping: SoftMapping | np.ndarray, x_tilde: np.ndarray,
                      x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    """``d(recon + l1) / d W_tilde`` at the soft reconstruction, shape (n_o, n_i)."""
    p = mapping.probabilities() if isinstance(mapping, SoftMapping) else np.asarray(mapping)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    target = _target(layer, np.asarray(x, dtype=np.float64))
    w_ref = layer.weights.astype(np.float64)
    fw = _forward(cbs, p, x_tilde, target, layer, w_ref, 0.0, 2.0)
    return _upstream(fw, x_tilde, target, layer, w_ref)


def grad_codebooks(cbs: CodebookSet, p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Exact gradient w.r.t. every codeword: upstream filtered by the soft mapping."""
    v = upstream * cbs.row_scale()[:, None]
    per_row = np.einsum("oi,oiq->oq", v, p)
    grad = np.zeros_like(cbs.codebooks)
    np.add.at(grad, cbs.row_codebook(), per_row)
    return grad


def proximal_matrix(cbs: CodebookSet, argmax: np.ndarray) -> np.ndarray:
    """Inverse-distance weights toward each codeword from the assigned one.

    ``sign(c_a - c_j) / (1 + |c_a - c_j|) - [j == a]`` with sign(0) = +1, so
    the assigned entry is exactly zero.
    """
    return kernels.proximal_matrix(cbs.codebooks, cbs.row_codebook(), np.asarray(argmax, dtype=np.int64))


def standard_factor(codebook: np.ndarray, assigned: int) -> np.ndarray:
    """Chain-rule codebook factor ``c_j - c_a`` at a hard assignment (grows with distance)."""
    c = np.asarray(codebook, dtype=np.float64)
    return c - c[assigned]


def grad_mapping_proximal(cbs: CodebookSet, mapping: SoftMapping, upstream: np.ndarray,
                          lam: float = 0.0, beta: float = 2.0, p: np.ndarray | None = None) -> np.ndarray:
    """Proximal mapping gradient.

    The first term is ``-(scale * upstream) * D`` where D is
    :func:`proximal_matrix`; its sign makes a descent step move the mapping
    toward codewords on the side the upstream gradient points to, as the exact
    chain rule does. The softmax Jacobian and codeword magnitudes are absent
    by design. The hardness term is differentiated exactly.
    """
    v = upstream * cbs.row_scale()[:, None]
    grad = -v[..., None] * proximal_matrix(cbs, mapping.argmax())
    if lam:
        grad += lam * _hardness_grad_logits(mapping.probabilities() if p is None else p, beta)
    return grad


def grad_mapping_naive(cbs: CodebookSet, mapping: SoftMapping, upstream: np.ndarray,
                       lam: float = 0.0, beta: float = 2.0, p: np.ndarray | None = None) -> np.ndarray:
    """Exact chain-rule gradient of the objective w.r.t. the logits."""
    p = mapping.probabilities() if p is None else p
    v = upstream * cbs.row_scale()[:, None]
    rows = _weighted_codewords(cbs)
    mean = np.einsum("oiq,oq->oi", p, rows)
    grad = v[..., None] * p * (rows[:, None, :] - mean[..., None])
    if lam:
        grad += lam * _hardness_grad_logits(p, beta)
    return grad


def loss_total(cbs: CodebookSet, mapping: SoftMapping, x_tilde: np.ndarray, x: np.ndarray,
               layer: LinearLayer, sched: Schedule, step: int,
               rule: UpdateRule = UpdateRule.PROXIMAL) -> tuple[float, dict]:
    """Objective value and its parts (``recon``, ``l1``, ``l2``, ``beta``)."""
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    w_ref = layer.weights.astype(np.float64)
    target = _target(layer, x)
    beta = sched.beta(step)
    lam_eff = sched.lam if sched.regularized(step) else 0.0
    p = mapping.one_hot() if UpdateRule(rule) is UpdateRule.CODEBOOK else mapping.probabilities()
    fw = _forward(cbs, p, x_tilde, target, layer, w_ref, lam_eff, beta)
    return fw.total, dict(fw.parts, beta=beta)


def _target(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    z = x @ layer.weights.astype(np.float64).T
    if layer.bias is not None:
        z = z + layer.bias.astype(np.float64)
    return activate(z, layer.activation)


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize_layer(layer: LinearLayer, cbs: CodebookSet, mapping: SoftMapping,
                   x_tilde: np.ndarray, x: np.ndarray, sched: Schedule = Schedule(),
                   rule: UpdateRule | str = UpdateRule.PROXIMAL) -> tuple[CodebookSet, SoftMapping, Trace]:
    """Minimize the layer objective with Adam; returns new parameters and the loss trace.

    ``layer`` carries the reference weights, bias and activation. Inputs are
    not modified.
    """
    rule = UpdateRule(rule)
    cbs = cbs.copy()
    mapping = mapping.copy()
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    w_ref = layer.weights.astype(np.float64)
    target = _target(layer, x)
    n = x_tilde.shape[0]
    bs = n if not sched.batch_size else min(sched.batch_size, n)
    n_batches = -(-n // bs)
    trace = Trace()
    opt_c = _Adam(cbs.codebooks.shape, sched.lr_codebook)
    opt_i = _Adam(mapping.logits.shape, sched.lr_mapping)
    initial = None

    for step in range(sched.iterations):
        lo = (step % n_batches) * bs
        xb, tb = x_tilde[lo : lo + bs], target[lo : lo + bs]
        beta = sched.beta(step)
        lam_eff = sched.lam if sched.regularized(step) else 0.0
        p = mapping.one_hot() if rule is UpdateRule.CODEBOOK else mapping.probabilities()
        fw = _forward(cbs, p, xb, tb, layer, w_ref, lam_eff, beta)
        trace.append(step, fw.total, fw.parts, beta)
        if not np.isfinite(fw.total):
            raise NumericError(f"non-finite loss at step {step}; learning rate too high?", trace)
        if initial is None:
            initial = fw.total
        elif initial > 0 and fw.total > sched.divergence_factor * initial:
            raise NumericError(f"loss diverged at step {step} ({fw.total:.3g} vs initial {initial:.3g})", trace)

        up = _upstream(fw, xb, tb, layer, w_ref)
        g_c = grad_codebooks(cbs, p, up)
        if rule is UpdateRule.PROXIMAL:
            g_i = grad_mapping_proximal(cbs, mapping, up, lam_eff, beta, p)
        elif rule is UpdateRule.NAIVE:
            g_i = grad_mapping_naive(cbs, mapping, up, lam_eff, beta, p)
        else:
            g_i = None
        opt_c.step(cbs.codebooks, g_c)
        if g_i is not None:
            opt_i.step(mapping.logits, g_i)
    return cbs, mapping, trace


def finalize(cbs: CodebookSet, mapping: SoftMapping) -> tuple[CodebookSet, HardMapping]:
    """Hard assignment by argmax (ties: lowest index); codewords rounded to f16."""
    out = cbs.copy()
    out.codebooks = out.codebooks.astype(np.float16).astype(np.float64)
    if out.scales is not None:
        out.scales = out.scales.astype(np.float16).astype(np.float64)
    return out, HardMapping(mapping.argmax())


def hardness_fraction(mapping: SoftMapping, lo: float = 0.05, hi: float = 0.95) -> float:
    """Share of assignment probabilities outside (lo, hi)."""
    p = mapping.probabilities()
    return float(np.mean((p <= lo) | (p >= hi)))


def with_iterations(sched: Schedule, iterations: int) -> Schedule:
    return replace(sched, iterations=iterations)
