"""Online teacher-student adaptation over a stream of target volumes."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from . import backbone
from .backbone import UNet3D
from .cdpl import (
    GateReport,
    binary_entropy_loss,
    consistency_loss,
    disagreement_variance,
    pseudo_label_loss,
    total_loss,
)
from .config import ModelConfig, VistaConfig
from .errors import CheckpointMismatch, NonFiniteLoss, ShapeError, UnknownVariant
from .isig import generate_views
from .volume import MultiSequenceVolume, ProbabilityMap, read_container, write_container

log = logging.getLogger(__name__)

VARIANTS = ("full", "pl_only", "cons_only", "no_gate", "no_ugps", "no_lfccs")


@dataclass
class AdaptationState:
    student: UNet3D
    teacher: UNet3D
    optimizer: torch.optim.Optimizer
    params: list[nn.Parameter]
    cfg: VistaConfig
    rng: np.random.Generator
    step: int = 0
    cases_seen: int = 0


@dataclass(frozen=True)
class StepRecord:
    loss_pl: float
    loss_cons: float
    loss_total: float
    gate: GateReport | None

    def log_record(self, case: str, step: int) -> dict:
        g = self.gate
        return {
            "case": case,
            "step": step,
            "loss_pl": self.loss_pl,
            "loss_cons": self.loss_cons,
            "loss_total": self.loss_total,
            "var_open": g.variance_open_fraction if g else None,
            "conf_open": g.confidence_open_fraction if g else None,
            "joint_open": g.joint_open_fraction if g else None,
        }


@dataclass
class CaseResult:
    case_id: str
    prediction: ProbabilityMap | None
    steps: list[StepRecord] = field(default_factory=list)
    skipped: bool = False

    def log_records(self) -> list[dict]:
        return [rec.log_record(self.case_id, k) for k, rec in enumerate(self.steps)]


def _make_optimizer(params: list[nn.Parameter], cfg: VistaConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr)


def _student_norm_mode(cfg: VistaConfig) -> str:
    if not cfg.freeze_bn_stats:
        return "batch_update"
    return "running" if cfg.student_norm == "running" else "batch"


def init_state(source, cfg: VistaConfig, model_cfg: ModelConfig | None = None) -> AdaptationState:
    """Student and teacher both start as copies of the source model.

    ``source`` is a model or a checkpoint path; with ``model_cfg`` given, a
    checkpoint of a different architecture raises CheckpointMismatch.
    """
    if isinstance(source, (str, Path)):
        source, _ = backbone.load_checkpoint(source, expected=model_cfg)
    elif model_cfg is not None and source.cfg.to_dict() | {"seed": 0} != model_cfg.to_dict() | {"seed": 0}:
        raise CheckpointMismatch(f"model architecture {source.cfg} does not match {model_cfg}")
    student = copy.deepcopy(source)
    teacher = copy.deepcopy(source)
    params = backbone.select_trainable(student, "bn_affine_only")
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    backbone.set_norm_mode(student, _student_norm_mode(cfg))
    return AdaptationState(
        student=student,
        teacher=teacher,
        optimizer=_make_optimizer(params, cfg),
        params=params,
        cfg=cfg,
        rng=np.random.default_rng(cfg.seed),
    )


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float, include_buffers: bool = False) -> nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student, element-wise."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeError("teacher and student have different parameters")
    pairs = [(t_params[n], s_params[n]) for n in t_params]
    if include_buffers:
        t_buf, s_buf = dict(teacher.named_buffers()), dict(student.named_buffers())
        pairs += [(t_buf[n], s_buf[n]) for n in t_buf if t_buf[n].is_floating_point()]
    for t, s in pairs:
        if t.shape != s.shape:
            raise ShapeError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        # lerp is exact at the fixed point t == s
        t.lerp_(s, 1.0 - alpha)
    return teacher


def _as_tensor(vol: MultiSequenceVolume) -> torch.Tensor:
    return torch.from_numpy(np.array(vol.data, dtype=np.float32))


@torch.no_grad()
def _teacher_probs(teacher: UNet3D, x: torch.Tensor) -> torch.Tensor:
    teacher.eval()
    return torch.sigmoid(teacher(x))


def _needs_views(cfg: VistaConfig) -> bool:
    return cfg.lam > 0 or (cfg.use_pl and cfg.use_var_gate)


def _adapt_step(state: AdaptationState, x0: torch.Tensor, vol: MultiSequenceVolume) -> StepRecord:
    cfg = state.cfg
    p0 = _teacher_probs(state.teacher, x0[None])[0]
    if _needs_views(cfg):
        views = generate_views(vol, p0.numpy(), cfg, state.rng)
        xv = torch.stack([_as_tensor(v) for v in views.views[1:]])
        pv = _teacher_probs(state.teacher, xv)
        V = disagreement_variance([p0, pv[0], pv[1]])
        student_in = torch.cat([x0[None], xv]) if cfg.lam > 0 else x0[None]
    else:
        V = torch.zeros_like(p0)
        student_in = x0[None]

    z = state.student(student_in)
    l_pl, report = pseudo_label_loss(z[0], p0, V, cfg)
    if not cfg.use_pl:
        l_pl = torch.zeros((), dtype=z.dtype)
    l_cons = consistency_loss([z[1], z[2]], p0) if cfg.lam > 0 else torch.zeros((), dtype=z.dtype)
    loss = total_loss(l_pl, l_cons, cfg.lam)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        state.optimizer.step()
    state.step += 1
    if cfg.ema_per_step:
        ema_update(state.teacher, state.student, cfg.ema_alpha, include_buffers=not cfg.freeze_bn_stats)
    return StepRecord(l_pl.item(), l_cons.item(), loss.item(), report)


def adapt_volume(state: AdaptationState, vol: MultiSequenceVolume, case_id: str = "case") -> tuple[AdaptationState, CaseResult]:
    """Run ``cfg.steps`` updates on one volume, then predict with the teacher.

    A non-finite loss restores the pre-case student, teacher and optimizer and
    marks the case as skipped; its prediction then comes from the restored
    teacher.
    """
    cfg = state.cfg
    if vol.num_sequences != state.student.cfg.in_channels:
        raise ShapeError(f"volume has {vol.num_sequences} sequences, model expects {state.student.cfg.in_channels}")
    if cfg.reset_optimizer_per_case:
        state.optimizer = _make_optimizer(state.params, cfg)
    saved = (
        copy.deepcopy(state.student.state_dict()),
        copy.deepcopy(state.teacher.state_dict()),
        copy.deepcopy(state.optimizer.state_dict()),
        state.step,
    )
    x0 = _as_tensor(vol)
    result = CaseResult(case_id, None)
    backbone.set_norm_mode(state.student, _student_norm_mode(cfg))
    try:
        for _ in range(cfg.steps):
            result.steps.append(_adapt_step(state, x0, vol))
        if not cfg.ema_per_step:
            ema_update(state.teacher, state.student, cfg.ema_alpha, include_buffers=not cfg.freeze_bn_stats)
    except NonFiniteLoss as exc:
        log.warning("case %s skipped: %s", case_id, exc)
        state.student.load_state_dict(saved[0])
        state.teacher.load_state_dict(saved[1])
        state.optimizer.load_state_dict(saved[2])
        state.step = saved[3]
        result.skipped = True
    state.cases_seen += 1
    result.prediction = ProbabilityMap(_teacher_probs(state.teacher, x0[None])[0].numpy())
    return state, result


def run_stream(
    state: AdaptationState,
    volumes: Sequence[MultiSequenceVolume],
    case_ids: Sequence[str] | None = None,
    on_case: Callable[[CaseResult], None] | None = None,
) -> list[CaseResult]:
    """Adapt to the volumes in order, one at a time, carrying state across cases."""
    if len(volumes) == 0:
        raise ValueError("empty stream")
    ids = list(case_ids) if case_ids is not None else [f"case{i:03d}" for i in range(len(volumes))]
    results = []
    for cid, vol in zip(ids, volumes):
        state, res = adapt_volume(state, vol, cid)
        results.append(res)
        if on_case is not None:
            on_case(res)
    return results


@torch.no_grad()
def run_no_tta(model: UNet3D, volumes: Iterable[MultiSequenceVolume]) -> list[ProbabilityMap]:
    was_training = model.training
    model.eval()
    out = [ProbabilityMap(_teacher_probs(model, _as_tensor(v)[None])[0].numpy()) for v in volumes]
    model.train(was_training)
    return out


def run_tent_baseline(
    state: AdaptationState,
    volumes: Sequence[MultiSequenceVolume],
    case_ids: Sequence[str] | None = None,
) -> list[CaseResult]:
    """Entropy minimization of the student's own predictions (no teacher, views or gates).

    Predictions come from the adapted student under the same normalization it
    was trained with.
    """
    cfg = state.cfg
    ids = list(case_ids) if case_ids is not None else [f"case{i:03d}" for i in range(len(volumes))]
    mode = _student_norm_mode(cfg)
    results = []
    for cid, vol in zip(ids, volumes):
        if cfg.reset_optimizer_per_case:
            state.optimizer = _make_optimizer(state.params, cfg)
        backbone.set_norm_mode(state.student, mode)
        x = _as_tensor(vol)[None]
        res = CaseResult(cid, None)
        saved = copy.deepcopy(state.student.state_dict())
        try:
            for _ in range(cfg.steps):
                loss = binary_entropy_loss(state.student(x))
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite entropy at step {state.step}")
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                state.step += 1
                res.steps.append(StepRecord(0.0, 0.0, loss.item(), None))
        except NonFiniteLoss as exc:
            log.warning("case %s skipped: %s", cid, exc)
            state.student.load_state_dict(saved)
            res.skipped = True
        with torch.no_grad():
            res.prediction = ProbabilityMap(torch.sigmoid(state.student(x))[0].numpy())
        results.append(res)
    return results


def ablation_variant(cfg: VistaConfig, variant: str) -> VistaConfig:
    if variant == "full":
        return cfg
    if variant == "pl_only":
        return cfg.replace(lam=0.0, use_var_gate=False, use_pl=True)
    if variant == "cons_only":
        return cfg.replace(use_pl=False)
    if variant == "no_gate":
        return cfg.replace(use_var_gate=False)
    if variant == "no_ugps":
        return cfg.replace(use_ugps=False, use_lfccs=True)
    if variant == "no_lfccs":
        return cfg.replace(use_lfccs=False, use_ugps=True)
    raise UnknownVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# persistence


def write_step_log(results: Iterable[CaseResult], path: str | Path) -> None:
    with open(path, "w") as fh:
        for res in results:
            for rec in res.log_records():
                fh.write(json.dumps(rec) + "\n")


def save_state(state: AdaptationState, path: str | Path) -> None:
    """Persist student, teacher, Adam moments, step counters and rng state."""
    arrays = {}
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        for name, t in model.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().numpy().astype(np.float32)
    opt_state = state.optimizer.state_dict()
    adam_steps = {}
    for idx, st in opt_state["state"].items():
        arrays[f"adam/{idx}/exp_avg"] = st["exp_avg"].numpy()
        arrays[f"adam/{idx}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
        adam_steps[str(idx)] = float(st["step"])
    meta = {
        "model": state.student.cfg.to_dict(),
        "cfg": state.cfg.to_dict(),
        "step": state.step,
        "cases_seen": state.cases_seen,
        "adam_steps": adam_steps,
        "rng": state.rng.bit_generator.state,
    }
    write_container(path, arrays, kind="adaptation_state", meta=meta)


def load_state(path: str | Path) -> AdaptationState:
    arrays, kind, meta = read_container(path)
    if kind != "adaptation_state":
        raise CheckpointMismatch(f"{path}: not an adaptation state (kind={kind!r})")
    model_cfg = ModelConfig(**meta["model"])
    cfg = VistaConfig(**meta["cfg"])
    source = backbone.build_model(model_cfg)
    state = init_state(source, cfg)
    for prefix, model in (("student", state.student), ("teacher", state.teacher)):
        sub = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
        backbone.load_state_arrays(model, sub)
    opt_state = state.optimizer.state_dict()
    for idx_s, step in meta["adam_steps"].items():
        idx = int(idx_s)
        opt_state["state"][idx] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(arrays[f"adam/{idx}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam/{idx}/exp_avg_sq"].copy()),
        }
    state.optimizer.load_state_dict(opt_state)
    state.step = int(meta["step"])
    state.cases_seen = int(meta["cases_seen"])
    state.rng.bit_generator.state = meta["rng"]
    return state


def mean_step_loss(results: Sequence[CaseResult]) -> float:
    losses = [r.loss_total for res in results for r in res.steps]
    return float(np.mean(losses)) if losses else math.nan
