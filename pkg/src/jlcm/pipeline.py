"""End-to-end compression of a layer stack.

Per layer: reorder rows (absorbed by the successor's columns), plan, initialize
codebooks, optionally optimize against features from the already compressed
prefix, finalize. The input model is never modified.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import Method
from .learner import NumericError, Schedule, SoftMapping, Trace, UpdateRule, finalize, optimize_layer
from .model_io import CalibrationSet, ModelContainer, apply_permutation, forward
from .packfmt import CompressedLayer, CompressedModel, FootprintReport, measure_footprint
from .planner import CompressionPlan, Mode, derive_plan
from .reorder import initialize, reorder

log = logging.getLogger(__name__)


class LayerError(RuntimeError):
    def __init__(self, layer: int, cause: Exception):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    alpha: float
    mode: str = "auto"
    clustering: Method = Method.HIERARCHICAL
    optimize: bool = True
    rule: UpdateRule = UpdateRule.PROXIMAL
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 12345
    scale_method: str = "std"
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "clustering", Method(self.clustering))
        object.__setattr__(self, "rule", UpdateRule(self.rule))
        if self.mode != "auto":
            object.__setattr__(self, "mode", Mode.parse(self.mode).value)
        if self.schedule.seed != self.seed:
            object.__setattr__(self, "schedule", replace(self.schedule, seed=self.seed))

    def layer_mode(self) -> Mode:
        # sequential stacks are fully connected, where multiple codebooks win
        return Mode.MULTI_CODEBOOK if self.mode == "auto" else Mode(self.mode)

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, self.threads)
        return max(1, int(os.environ.get("JLCM_THREADS", "1")))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "mode": self.mode,
            "clustering": self.clustering.value,
            "optimize": self.optimize,
            "rule": self.rule.value,
            "seed": self.seed,
            "scale_method": self.scale_method,
            "schedule": asdict(self.schedule),
        }


@dataclass
class CompressionResult:
    compressed: CompressedModel
    footprint: FootprintReport
    traces: list[Trace | None]
    plans: list[CompressionPlan]
    permutations: list[np.ndarray]  # sigma per layer, identity for the last
    reference: ModelContainer  # original with permutations applied


def _plan_and_reorder(model: ModelContainer, cfg: RunConfig):
    ref = model
    plans, sigmas = [], []
    for l, layer in enumerate(model.layers):
        plan = derive_plan(layer.n_o, layer.n_i, cfg.alpha, cfg.layer_mode())
        plans.append(plan)
        if l + 1 < len(model.layers):
            rr = reorder(ref.layers[l].weights, plan.num_groups, cfg.clustering, cfg.seed + l)
            ref = apply_permutation(ref, l, rr.sigma)
            sigmas.append(rr.sigma)
        else:
            sigmas.append(np.arange(layer.n_o))
    return ref, plans, sigmas


def _init_layer(ref: ModelContainer, plans, cfg: RunConfig, l: int):
    try:
        return initialize(ref.layers[l].weights, plans[l], cfg.clustering, cfg.seed + 1000 * (l + 1),
                          cfg.scale_method)
    except Exception as exc:
        raise LayerError(l, exc) from exc


def compress_model(model: ModelContainer, calib: CalibrationSet | np.ndarray | None, cfg: RunConfig,
                   hook=None) -> CompressionResult:
    """Compress every layer of ``model``.

    ``hook(layer, x_tilde, x)``, when given, sees the features fed to each
    layer's optimizer: ``x_tilde`` from the compressed prefix, ``x`` from the
    reference model.
    """
    ref, plans, sigmas = _plan_and_reorder(model, cfg)
    n_layers = len(model.layers)
    traces: list[Trace | None] = [None] * n_layers
    out_layers: list[CompressedLayer] = []

    if not cfg.optimize:
        workers = cfg.worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                inits = list(pool.map(lambda l: _init_layer(ref, plans, cfg, l), range(n_layers)))
        else:
            inits = [_init_layer(ref, plans, cfg, l) for l in range(n_layers)]
        for l, (cbs, hard) in enumerate(inits):
            layer = ref.layers[l]
            out_layers.append(CompressedLayer.from_codebooks(cbs, hard, layer.activation, layer.bias))
    else:
        if calib is None:
            raise ValueError("optimization needs a calibration set")
        inputs = calib.inputs if isinstance(calib, CalibrationSet) else np.asarray(calib, dtype=np.float32)
        x = x_tilde = inputs
        for l in range(n_layers):
            layer = ref.layers[l]
            cbs, hard = _init_layer(ref, plans, cfg, l)
            if hook is not None:
                hook(l, x_tilde, x)
            mapping = SoftMapping.from_hard(hard, plans[l].codebook_size, cfg.schedule.init_logit)
            try:
                cbs, mapping, traces[l] = optimize_layer(layer, cbs, mapping, x_tilde, x, cfg.schedule, cfg.rule)
            except NumericError:
                raise
            except Exception as exc:
                raise LayerError(l, exc) from exc
            cbs, hard = finalize(cbs, mapping)
            done = CompressedLayer.from_codebooks(cbs, hard, layer.activation, layer.bias)
            out_layers.append(done)
            log.info("layer %d: final loss %.6g", l, traces[l].totals[-1] if len(traces[l]) else float("nan"))
            x = layer(x)
            x_tilde = done(x_tilde)

    compressed = CompressedModel(tuple(out_layers))
    return CompressionResult(compressed, measure_footprint(compressed, model), traces, plans, sigmas, ref)


# --------------------------------------------------------------------------
# evaluation


def _weights_of(model) -> list[np.ndarray]:
    if isinstance(model, CompressedModel):
        return [l.weights() for l in model.layers]
    return [l.weights for l in model.layers]


def _forward_any(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, CompressedModel):
        return model.forward(x)
    return forward(model, x)


def recover_permutations(original, compressed) -> list[np.ndarray]:
    """Match hidden units of ``compressed`` to ``original`` row by row.

    Layer l's rows are assigned to original rows by minimum total squared
    distance once its columns are mapped back through layer l-1's match.
    The last layer is never reordered. Returns sigma (old -> new) per layer.
    """
    w_orig, w_comp = _weights_of(original), _weights_of(compressed)
    sigmas = []
    prev_order = np.arange(w_orig[0].shape[1])
    for l, (wo, wc) in enumerate(zip(w_orig, w_comp)):
        cols = np.empty_like(wc)
        cols[:, prev_order] = wc
        if l == len(w_orig) - 1:
            order = np.arange(wo.shape[0])
        else:
            cost = ((cols[:, None, :].astype(np.float64) - wo[None, :, :]) ** 2).sum(axis=2)
            _, order = linear_sum_assignment(cost)
        sigma = np.empty_like(order)
        sigma[order] = np.arange(order.size)
        sigmas.append(sigma)
        prev_order = order
    return sigmas


def evaluate(original, compressed, eval_inputs, permutations=None) -> dict:
    """Deviation metrics between two models computing the same function."""
    x = np.asarray(eval_inputs, dtype=np.float32)
    y0 = _forward_any(original, x).astype(np.float64)
    y1 = _forward_any(compressed, x).astype(np.float64)
    if permutations is None:
        permutations = recover_permutations(original, compressed)
    layer_mse = []
    prev_order = None
    for wo, wc, sigma in zip(_weights_of(original), _weights_of(compressed), permutations):
        order = np.argsort(sigma)
        aligned = np.empty_like(wc, dtype=np.float64)
        cols = np.arange(wo.shape[1]) if prev_order is None else prev_order
        aligned[np.ix_(order, cols)] = wc
        layer_mse.append(float(np.mean((aligned - wo) ** 2)))
        prev_order = order
    metrics = {
        "output_mse": float(np.mean((y1 - y0) ** 2)),
        "max_abs_deviation": float(np.max(np.abs(y1 - y0))) if y0.size else 0.0,
        "layer_weight_mse": layer_mse,
    }
    if y0.ndim == 2 and y0.shape[1] > 1:
        metrics["top1_agreement"] = float(np.mean(np.argmax(y0, axis=1) == np.argmax(y1, axis=1)))
    return metrics


def run_report(result: CompressionResult, cfg: RunConfig, metrics: dict | None = None) -> dict:
    return {
        "config": cfg.to_dict(),
        "plans": [p.to_dict() for p in result.plans],
        "footprint": result.footprint.to_dict(),
        "metrics": metrics or {},
        "permutations": [s.tolist() for s in result.permutations],
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
