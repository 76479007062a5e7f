"""Training objectives.

Alignment terms (image/text/caption/explanation contrastive plus the
image-explanation authenticity loss), the attention-guidance loss, the patch
classification loss, the four detection/grounding sub-losses and their
weighted total.  All functions take batched tensors and return a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

EPS = 1e-7
TAU_MIN = 1e-3


def _prob_clamp(p):
    return p.clamp(EPS, 1.0 - EPS)


def info_nce(anchor, positive, tau, gate=None):
    """In-batch InfoNCE from ``anchor[i]`` to ``positive[i]`` over all positives.

    Similarity is cosine divided by ``tau``.  Only rows with ``gate`` true
    contribute; the result is their mean (0 when no row is gated in).
    """
    if anchor.shape != positive.shape or anchor.dim() != 2:
        raise ValueError("anchor and positive must both be (B, d) with equal shapes")
    if (anchor.norm(dim=-1) == 0).any() or (positive.norm(dim=-1) == 0).any():
        raise ValueError("cannot take cosine similarity of a zero vector")
    if gate is None:
        gate = torch.ones(anchor.shape[0], dtype=torch.bool, device=anchor.device)
    gate = gate.to(torch.bool)
    if not gate.any():
        return anchor.sum() * 0.0
    tau = torch.as_tensor(tau, dtype=anchor.dtype, device=anchor.device).clamp_min(TAU_MIN)
    sim = F.normalize(anchor, dim=-1) @ F.normalize(positive, dim=-1).t() / tau
    per_row = -torch.diagonal(torch.log_softmax(sim, dim=-1))
    return per_row[gate].mean()


def vlc_terms(img, txt, cap, expl, pristine, tau) -> dict[str, torch.Tensor]:
    """All six directional contrastive terms.  Explanation terms use only
    pristine pairs; text and caption terms use every pair."""
    B = img.shape[0]
    if not (txt.shape[0] == cap.shape[0] == expl.shape[0] == pristine.shape[0] == B):
        raise ValueError("feature batches must be aligned (equal batch sizes)")
    pristine = pristine.to(torch.bool)
    return {
        "i2t": info_nce(img, txt, tau),
        "t2i": info_nce(txt, img, tau),
        "i2c": info_nce(img, cap, tau),
        "c2i": info_nce(cap, img, tau),
        "i2e": info_nce(img, expl, tau, pristine),
        "e2i": info_nce(expl, img, tau, pristine),
    }


def vlc_loss(img, txt, cap, expl, pristine, tau):
    t = vlc_terms(img, txt, cap, expl, pristine, tau)
    return (t["i2t"] + t["t2i"]) / 2 + (t["i2c"] + t["c2i"] + t["i2e"] + t["e2i"]) / 4


def ied_loss(authenticity_prob, pristine):
    """Binary cross-entropy of the image-explanation authenticity score
    against the pristine indicator, averaged over the batch."""
    p = _prob_clamp(authenticity_prob)
    target = pristine.to(p.dtype)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def mgca_loss(attn, guide, valid=None):
    """Attention-guidance loss ``-(1/|A|) * sum(G * log A)``.

    ``attn`` and ``guide`` are ``(T, P)`` or ``(B, T, P)``; ``valid`` marks
    cells that count toward ``|A|`` (padding excluded).  Batched input is
    averaged over samples whose guide has at least one active cell.
    """
    if attn.shape != guide.shape:
        raise ValueError(f"attention {tuple(attn.shape)} and guide {tuple(guide.shape)} differ in shape")
    squeeze = attn.dim() == 2
    if squeeze:
        attn, guide = attn[None], guide[None]
        valid = None if valid is None else valid[None]
    if valid is None:
        valid = torch.ones_like(guide, dtype=torch.bool)
    guide = guide.to(attn.dtype) * valid
    size = valid.flatten(1).sum(-1).clamp_min(1).to(attn.dtype)
    per_sample = -(guide * torch.log(attn.clamp_min(EPS))).flatten(1).sum(-1) / size
    active = guide.flatten(1).sum(-1) > 0
    if not active.any():
        return attn.sum() * 0.0
    return per_sample[active].mean()


def pmm_loss(patch_logits, indicator):
    """Patch BCE over entries labelled 0/1 (``-1`` ignored), normalized per
    sample by the number of labelled patches; samples with none are skipped."""
    squeeze = patch_logits.dim() == 1
    if squeeze:
        patch_logits, indicator = patch_logits[None], indicator[None]
    if patch_logits.shape != indicator.shape:
        raise ValueError("patch logits and indicator must have the same shape")
    used = indicator >= 0
    target = indicator.clamp_min(0).to(patch_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(patch_logits, target, reduction="none")
    n_eff = used.sum(-1)
    has = n_eff > 0
    if not has.any():
        return patch_logits.sum() * 0.0
    per_sample = (bce * used).sum(-1)[has] / n_eff[has].to(bce.dtype)
    return per_sample.mean()


def box_cxcywh_to_xyxy(box):
    cx, cy, w, h = box.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_iou_terms(pred, target):
    """Return ``(iou, giou)`` for paired ``(..., 4)`` cxcywh boxes.

    Degenerate pairs: zero union counts as IoU 1 when the boxes coincide and 0
    otherwise; zero enclosing area leaves GIoU equal to IoU.
    """
    a, b = box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(target)
    area_a = (a[..., 2] - a[..., 0]).clamp_min(0) * (a[..., 3] - a[..., 1]).clamp_min(0)
    area_b = (b[..., 2] - b[..., 0]).clamp_min(0) * (b[..., 3] - b[..., 1]).clamp_min(0)
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp_min(0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp_min(0)
    inter = iw * ih
    union = area_a + area_b - inter
    same = (a == b).all(-1)
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    iou = torch.where(union > 0, inter / safe_union, same.to(inter.dtype))
    cw = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    ch = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    safe_enclose = torch.where(enclose > 0, enclose, torch.ones_like(enclose))
    giou = torch.where(enclose > 0, iou - (enclose - union) / safe_enclose, iou)
    return iou, giou


def img_loss(pred_box, y_box, contributing=None, iou_mode: str = "giou"):
    """L1 box distance plus ``1 - GIoU`` (or ``1 - IoU``), averaged over the
    contributing samples (image-edited pairs and pristine pairs)."""
    if iou_mode not in ("giou", "iou"):
        raise ValueError("iou_mode must be 'giou' or 'iou'")
    if pred_box.dim() == 1:
        pred_box, y_box = pred_box[None], y_box[None]
    if contributing is None:
        contributing = torch.ones(pred_box.shape[0], dtype=torch.bool, device=pred_box.device)
    contributing = contributing.to(torch.bool)
    if not contributing.any():
        return pred_box.sum() * 0.0
    l1 = (pred_box - y_box).abs().sum(-1)
    iou, giou = box_iou_terms(pred_box, y_box)
    overlap = giou if iou_mode == "giou" else iou
    return (l1 + 1.0 - overlap)[contributing].mean()


def bic_loss(bin_logit, y_bin):
    return F.binary_cross_entropy_with_logits(bin_logit, y_bin.to(bin_logit.dtype))


def mlc_loss(multilabel_logits, y_mul):
    """Sum of the per-class binary cross-entropies, averaged over the batch."""
    bce = F.binary_cross_entropy_with_logits(multilabel_logits, y_mul.to(multilabel_logits.dtype), reduction="none")
    return bce.sum(-1).mean()


def tmg_loss(token_logits, y_tok, teacher_probs=None, alpha_mom: float = 0.0, token_mask=None):
    """Token grounding: ``(1 - a) * CE(student, y_tok) + a * KL(student || teacher)``,
    averaged over real (non-padded) tokens of the batch."""
    if token_mask is None:
        token_mask = torch.ones(token_logits.shape[:-1], dtype=torch.bool, device=token_logits.device)
    token_mask = token_mask.to(torch.bool)
    if not token_mask.any():
        return token_logits.sum() * 0.0
    logp = torch.log_softmax(token_logits, dim=-1)
    ce = F.nll_loss(logp[token_mask], y_tok[token_mask].long(), reduction="mean")
    if alpha_mom == 0:
        return ce
    if teacher_probs is None:
        raise ValueError("alpha_mom > 0 needs teacher probabilities")
    log_t = torch.log(teacher_probs.clamp_min(EPS))
    kl = (logp.exp() * (logp - log_t)).sum(-1)[token_mask].mean()
    return (1 - alpha_mom) * ce + alpha_mom * kl


ABLATABLE = ("LMA", "MGCA", "PMM")


@dataclass
class LossBundle:
    l_vlc: torch.Tensor
    l_ied: torch.Tensor
    l_lma: torch.Tensor
    l_mgca: torch.Tensor
    l_pmm: torch.Tensor
    l_img: torch.Tensor
    l_bic: torch.Tensor
    l_mlc: torch.Tensor
    l_tmg: torch.Tensor
    l_dgm: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def total_loss(
    *,
    l_img,
    l_bic,
    l_mlc,
    l_tmg,
    l_vlc=0.0,
    l_ied=0.0,
    l_mgca=0.0,
    l_pmm=0.0,
    alpha: float = 0.1,
    lam: float = 0.01,
    ablations=(),
) -> LossBundle:
    """Compose ``L_dgm + L_lma + alpha * L_mgca + lam * L_pmm``.

    Components named in ``ablations`` (any of LMA, MGCA, PMM) are replaced by
    an exact zero.  The sum is formed in float64 so the logged total matches
    the logged components to well below float32 resolution.
    """
    ablations = {a.upper() for a in ablations}

    def t(x):
        return torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x.to(torch.float64)

    zero = torch.zeros((), dtype=torch.float64)
    l_img, l_bic, l_mlc, l_tmg = t(l_img), t(l_bic), t(l_mlc), t(l_tmg)
    if "LMA" in ablations:
        l_vlc, l_ied = zero, zero
    l_vlc, l_ied = t(l_vlc), t(l_ied)
    l_mgca = zero if "MGCA" in ablations else t(l_mgca)
    l_pmm = zero if "PMM" in ablations else t(l_pmm)
    l_dgm = l_img + l_bic + l_mlc + l_tmg
    l_lma = l_vlc + l_ied
    total = l_dgm + l_lma + alpha * l_mgca + lam * l_pmm
    return LossBundle(
        l_vlc=l_vlc, l_ied=l_ied, l_lma=l_lma, l_mgca=l_mgca, l_pmm=l_pmm,
        l_img=l_img, l_bic=l_bic, l_mlc=l_mlc, l_tmg=l_tmg, l_dgm=l_dgm, total=total,
    )
