"""Optimization loop, momentum token teacher, evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data.synthetic import MediaSample
from .data.vocab import encode
from .masks import build_patch_indicator, patch_flags_from_bbox
from .metrics import EvalRecord, metric_table
from .model import ASAPModel, ModelConfig, pad_ids, save_checkpoint

log = logging.getLogger(__name__)

ABLATIONS = ("LMA", "MGCA", "PMM", "HNP")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    warmup_steps: int = 1000
    lr_peak: float = 1e-4
    lr_floor: float = 1e-6
    weight_decay: float = 0.02
    alpha_mgca: float = 0.1
    lambda_pmm: float = 0.01
    delta_init: float = 0.5
    alpha_mom: float = 0.4
    teacher_momentum: float = 0.995
    ablations: list[str] = field(default_factory=list)
    seed: int = 0
    hnp_connectivity: int = 8
    iou_mode: str = "giou"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ablations = sorted({a.upper() for a in self.ablations})
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}; choose from {ABLATIONS}")
        if not self.lr_floor < self.lr_peak:
            raise ValueError("lr_floor must be below lr_peak")
        for name in ("weight_decay", "alpha_mgca", "lambda_pmm", "alpha_mom"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise ValueError("teacher_momentum must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.warmup_steps < 0:
            raise ValueError("batch_size and epochs must be >= 1, warmup_steps >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{"delta_init": self.delta_init, **self.model})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# Settings used for the synthetic desk-scale runs (2,000 pairs, 10 epochs of
# batch 32 = 630 updates): a 1,000-step warmup would never finish, so warmup is
# shortened, the peak raised for from-scratch encoders and the token teacher
# given a momentum whose horizon (about 20 steps) fits inside the run.
DESK_OVERRIDES = {"epochs": 10, "warmup_steps": 60, "lr_peak": 1e-3, "teacher_momentum": 0.95}


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_OVERRIDES, **overrides})


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine down to ``lr_floor``
    at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_peak * step / w
    if total_steps <= w:
        return cfg.lr_peak
    progress = min(1.0, (step - w) / (total_steps - w))
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def momentum_update(teacher, student, m: float):
    """``teacher <- m * teacher + (1 - m) * student`` for every paired tensor.

    Accepts modules or equally long sequences of tensors; returns ``teacher``.
    """
    t_params = list(teacher.parameters()) if isinstance(teacher, nn.Module) else list(teacher)
    s_params = list(student.parameters()) if isinstance(student, nn.Module) else list(student)
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student track different parameter sets")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise ValueError("teacher/student parameter shapes differ")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return teacher


class TokenTeacher(nn.Module):
    """Momentum copy of the text-biased encoder and the token detector."""

    def __init__(self, model: ASAPModel):
        super().__init__()
        self.text_mm = copy.deepcopy(model.text_mm)
        self.token_head = copy.deepcopy(model.token_head)
        for p in self.parameters():
            p.requires_grad_(False)

    @staticmethod
    def tracked(model: ASAPModel) -> nn.ModuleList:
        return nn.ModuleList([model.text_mm, model.token_head])

    @torch.no_grad()
    def token_probs(self, txt, img) -> torch.Tensor:
        feats, _ = self.text_mm(txt, img)
        return torch.softmax(self.token_head(feats.tokens), dim=-1)

    def update(self, model: ASAPModel, m: float) -> None:
        momentum_update(nn.ModuleList([self.text_mm, self.token_head]), self.tracked(model), m)


class EncodedDataset:
    """Samples stacked into tensors once, with masks precomputed."""

    def __init__(self, samples: list[MediaSample], cfg: ModelConfig, connectivity: int = 8, with_aux: bool = True):
        self.ids = [s.id for s in samples]
        self.samples = samples
        L = cfg.max_text_len
        self.images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
        self.text_ids, self.text_mask = pad_ids([s.text_ids for s in samples], L, cfg.vocab_size)
        if with_aux:
            self.cap_ids, self.cap_mask = pad_ids([encode(s.caption) for s in samples], L, cfg.vocab_size)
            self.exp_ids, self.exp_mask = pad_ids([encode(s.explanation) for s in samples], L, cfg.vocab_size)
        else:
            self.cap_ids = self.cap_mask = self.exp_ids = self.exp_mask = None
        lab = [s.labels for s in samples]
        self.y_bin = torch.tensor([l.y_bin for l in lab], dtype=torch.float32)
        self.y_mul = torch.from_numpy(np.stack([l.y_mul for l in lab])).float()
        self.y_box = torch.from_numpy(np.stack([l.y_box for l in lab])).float()
        self.y_tok = torch.from_numpy(np.stack([l.y_tok[:L] for l in lab])).float() * self.text_mask
        self.pristine = torch.tensor([l.pristine for l in lab], dtype=torch.bool)
        flags = np.stack([patch_flags_from_bbox(l.y_box, cfg.grid) for l in lab])
        self.patch_flags = torch.from_numpy(flags)
        self.img_manip = self.patch_flags.any(-1)
        self.patch_ind = {
            hnp: torch.from_numpy(
                np.stack([build_patch_indicator(f, cfg.grid, connectivity, hard_negatives=hnp).P for f in flags])
            ).long()
            for hnp in (True, False)
        }

    def __len__(self):
        return len(self.ids)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = {
            "images": self.images[idx],
            "ids": self.text_ids[idx],
            "mask": self.text_mask[idx],
            "y_bin": self.y_bin[idx],
            "y_mul": self.y_mul[idx],
            "y_box": self.y_box[idx],
            "y_tok": self.y_tok[idx],
            "pristine": self.pristine[idx],
            "patch_flags": self.patch_flags[idx],
            "img_manip": self.img_manip[idx],
            "patch_ind_hnp": self.patch_ind[True][idx],
            "patch_ind_all": self.patch_ind[False][idx],
        }
        if self.cap_ids is not None:
            out.update(
                cap_ids=self.cap_ids[idx], cap_mask=self.cap_mask[idx],
                exp_ids=self.exp_ids[idx], exp_mask=self.exp_mask[idx],
            )
        return out


class NonFiniteLossError(RuntimeError):
    pass


def mgca_from_maps(mm, text_mask, token_flags, patch_flags) -> torch.Tensor:
    """Guidance loss on both multimodal encoders, layer/head averaged, with cls
    rows and padded tokens excluded; the two encoders are averaged."""
    guide = token_flags.bool()[:, :, None] | patch_flags.bool()[:, None, :]  # (B, T, P)
    valid = text_mask[:, :, None].expand_as(guide)
    a_text = mm.attn_text_biased.mean()[:, 1:, :]  # (B, T, P)
    a_vis = mm.attn_vision_biased.mean()[:, 1:, :]  # (B, P, T)
    l_t = L.mgca_loss(a_text, guide, valid)
    l_v = L.mgca_loss(a_vis, guide.transpose(1, 2), valid.transpose(1, 2))
    return (l_t + l_v) / 2


def compute_losses(model: ASAPModel, teacher: TokenTeacher | None, batch: dict, cfg: TrainConfig) -> L.LossBundle:
    abl = set(cfg.ablations)
    img = model.encode_image(batch["images"])
    txt = model.encode_text(batch["ids"], batch["mask"])
    mm = model.multimodal(img, txt)
    heads = model.run_heads(mm)

    contributing = batch["img_manip"] | batch["pristine"]
    l_img = L.img_loss(heads.bbox, batch["y_box"], contributing, cfg.iou_mode)
    l_bic = L.bic_loss(heads.bin_logit, batch["y_bin"])
    l_mlc = L.mlc_loss(heads.multilabel_logits, batch["y_mul"])
    t_probs = None
    if teacher is not None and cfg.alpha_mom > 0:
        t_probs = teacher.token_probs(_detached(txt), _detached(img))
    alpha_mom = cfg.alpha_mom if t_probs is not None else 0.0
    l_tmg = L.tmg_loss(heads.token_logits, batch["y_tok"], t_probs, alpha_mom, batch["mask"])

    l_vlc = l_ied = l_mgca = l_pmm = 0.0
    if "LMA" not in abl:
        cap = model.encode_text(batch["cap_ids"], batch["cap_mask"])
        expl = model.encode_text(batch["exp_ids"], batch["exp_mask"])
        z_i = model.contrastive_embed(img, "vision")
        z_t, z_c, z_e = (model.contrastive_embed(f, "text") for f in (txt, cap, expl))
        l_vlc = L.vlc_loss(z_i, z_t, z_c, z_e, batch["pristine"], model.tau)
        mm_e = model.multimodal(img, expl)
        l_ied = L.ied_loss(model.authenticity(mm_e), batch["pristine"])
    if "MGCA" not in abl:
        l_mgca = mgca_from_maps(mm, batch["mask"], batch["y_tok"], batch["patch_flags"])
    if "PMM" not in abl:
        ind = batch["patch_ind_all"] if "HNP" in abl else batch["patch_ind_hnp"]
        l_pmm = L.pmm_loss(heads.patch_logits, ind)
    return L.total_loss(
        l_img=l_img, l_bic=l_bic, l_mlc=l_mlc, l_tmg=l_tmg,
        l_vlc=l_vlc, l_ied=l_ied, l_mgca=l_mgca, l_pmm=l_pmm,
        alpha=cfg.alpha_mgca, lam=cfg.lambda_pmm, ablations=abl & {"LMA", "MGCA", "PMM"},
    )


def _detached(feats):
    return type(feats)(cls=feats.cls.detach(), tokens=feats.tokens.detach(), pad_mask=feats.pad_mask)


def make_optimizer(model: ASAPModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 or name.endswith(".pos") or name.endswith("cls") else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_peak,
        betas=(0.9, 0.999),
    )


@dataclass
class TrainState:
    model: ASAPModel
    teacher: TokenTeacher
    optimizer: torch.optim.Optimizer
    total_steps: int
    step: int = 0


def init_state(cfg: TrainConfig, total_steps: int, model: ASAPModel | None = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = model or ASAPModel(cfg.model_config())
    return TrainState(model=model, teacher=TokenTeacher(model), optimizer=make_optimizer(model, cfg), total_steps=total_steps)


def train_step(batch: dict, state: TrainState, cfg: TrainConfig, dump_dir: Path | None = None) -> L.LossBundle:
    model = state.model
    model.train()
    lr = lr_at(state.step + 1, cfg, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    bundle = compute_losses(model, state.teacher, batch, cfg)
    values = bundle.as_dict()
    if not all(math.isfinite(v) for v in values.values()):
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / "nonfinite_dump.json").write_text(
                json.dumps({"step": state.step, "lr": lr, "losses": values, "config": asdict(cfg)}, indent=2)
            )
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {values}")
    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.optimizer.step()
    with torch.no_grad():
        model.tau.clamp_(min=L.TAU_MIN)
    state.teacher.update(model, cfg.teacher_momentum)
    state.step += 1
    return bundle


@torch.no_grad()
def predict(model: ASAPModel, images, ids, mask):
    """Inference on the original image-text pair only."""
    model.eval()
    mm, heads = model(images, ids, mask)
    return mm, heads


@torch.no_grad()
def evaluate(model: ASAPModel, samples, batch_size: int = 64) -> tuple[list[EvalRecord], dict[str, float]]:
    """Score every sample from its image and text alone."""
    data = samples if isinstance(samples, EncodedDataset) else EncodedDataset(samples, model.cfg, with_aux=False)
    records = []
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        b = data.batch(idx)
        _, heads = predict(model, b["images"], b["ids"], b["mask"])
        s_bin = torch.sigmoid(heads.bin_logit)
        s_mul = torch.sigmoid(heads.multilabel_logits)
        s_tok = torch.softmax(heads.token_logits, dim=-1)[..., 1]
        for j, i in enumerate(idx):
            n_tok = int(b["mask"][j].sum())
            records.append(
                EvalRecord(
                    id=data.ids[i],
                    y_bin=int(b["y_bin"][j]),
                    y_mul=b["y_mul"][j].tolist(),
                    y_box=b["y_box"][j].tolist(),
                    y_tok=[int(v) for v in b["y_tok"][j, :n_tok].tolist()],
                    s_bin=float(s_bin[j]),
                    s_mul=s_mul[j].tolist(),
                    s_box=heads.bbox[j].tolist(),
                    s_tok=s_tok[j, :n_tok].tolist(),
                )
            )
    return records, metric_table(records)


def fit(
    train_samples,
    val_samples,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Train for ``cfg.epochs`` (or ``max_steps`` updates) and return the final
    state plus one summary dict per epoch.

    With ``out_dir`` set, writes ``losses.jsonl`` (epoch means),
    ``steps.jsonl`` (every update), ``last.pt`` each epoch and ``best.pt`` on
    the best validation AUC.
    """
    mcfg = cfg.model_config()
    train = train_samples if isinstance(train_samples, EncodedDataset) else EncodedDataset(train_samples, mcfg, cfg.hnp_connectivity)
    val = None
    if val_samples is not None:
        val = val_samples if isinstance(val_samples, EncodedDataset) else EncodedDataset(val_samples, mcfg, with_aux=False)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs if max_steps is None else max_steps
    state = init_state(cfg, total)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
        for name in ("losses.jsonl", "steps.jsonl"):
            (out / name).write_text("")
    history = []
    best_auc = -1.0
    epoch = 0
    t0 = time.time()
    while state.step < total:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            if state.step >= total:
                break
            bundle = train_step(train.batch(order[start : start + cfg.batch_size]), state, cfg, out)
            values = bundle.as_dict()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            if out is not None:
                with (out / "steps.jsonl").open("a") as fh:
                    fh.write(json.dumps({"step": state.step, **values}) + "\n")
            if on_step is not None:
                on_step(state, bundle)
        summary = {"epoch": epoch, "step": state.step, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        if val is not None:
            _, table = evaluate(state.model, val)
            summary["val"] = table
        summary["elapsed_s"] = round(time.time() - t0, 2)
        history.append(summary)
        log.info("epoch %d step %d total %.4f %s", epoch, state.step, summary.get("total", float("nan")),
                 {k: round(v, 4) for k, v in summary.get("val", {}).items()})
        if out is not None:
            with (out / "losses.jsonl").open("a") as fh:
                fh.write(json.dumps(summary) + "\n")
            save_checkpoint(out / "last.pt", state.model, train_config=asdict(cfg), epoch=epoch, step=state.step)
            val_auc = summary.get("val", {}).get("AUC", float("nan"))
            if val is not None and math.isfinite(val_auc) and val_auc > best_auc:
                best_auc = val_auc
                save_checkpoint(out / "best.pt", state.model, train_config=asdict(cfg), epoch=epoch, step=state.step)
        epoch += 1
    return state, history
