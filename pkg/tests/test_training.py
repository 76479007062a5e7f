import json
import math

import pytest
import torch

from asap.data.synthetic import generate_dataset
from asap.training import (
    EncodedDataset,
    NonFiniteLossError,
    TokenTeacher,
    TrainConfig,
    compute_losses,
    evaluate,
    fit,
    init_state,
    lr_at,
    momentum_update,
    train_step,
)

TINY_MODEL = {"embed_dim": 32, "num_heads": 2, "num_layers_unimodal": 1, "num_layers_multimodal": 1}


def tiny_cfg(**kw):
    base = dict(batch_size=8, epochs=1, warmup_steps=2, lr_peak=1e-3, model=TINY_MODEL)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(48, seed=11)


@pytest.fixture(scope="module")
def encoded(samples):
    return EncodedDataset(samples, tiny_cfg().model_config())


# -- schedule ----------------------------------------------------------------

def test_lr_schedule_default_values():
    cfg = TrainConfig()
    total = 50 * 7200
    assert lr_at(0, cfg, total) == 0.0
    assert lr_at(500, cfg, total) == pytest.approx(5e-5, abs=1e-12)
    assert lr_at(1000, cfg, total) == pytest.approx(1e-4, abs=1e-12)
    assert lr_at(total, cfg, total) == pytest.approx(1e-6, abs=1e-12)


def test_lr_schedule_continuous_and_monotone_after_warmup():
    cfg = TrainConfig(warmup_steps=10)
    vals = [lr_at(s, cfg, 100) for s in range(101)]
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) <= 1e-5 + 1e-12
    assert all(a >= b for a, b in zip(vals[10:], vals[11:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg, 100)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(lr_floor=1e-3, lr_peak=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(ablations=["XYZ"])
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"epochs": 3, "ablations": ["mgca"]}))
    cfg = TrainConfig.from_json_file(p)
    assert cfg.epochs == 3 and cfg.ablations == ["MGCA"]
    assert (cfg.alpha_mgca, cfg.lambda_pmm, cfg.delta_init) == (0.1, 0.01, 0.5)


# -- momentum ----------------------------------------------------------------

def test_momentum_update_examples():
    for m, want in ((1.0, 1.0), (0.0, 0.0), (0.9, 0.9)):
        t, s = [torch.tensor([1.0])], [torch.tensor([0.0])]
        momentum_update(t, s, m)
        assert float(t[0]) == pytest.approx(want, abs=1e-7)
    with pytest.raises(ValueError):
        momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


def test_teacher_tracks_student():
    state = init_state(tiny_cfg(), 10)
    with torch.no_grad():
        for p in state.model.token_head.parameters():
            p.add_(1.0)
    before = [p.clone() for p in state.teacher.token_head.parameters()]
    state.teacher.update(state.model, 0.5)
    for b, t, s in zip(before, state.teacher.token_head.parameters(), state.model.token_head.parameters()):
        assert torch.allclose(t, 0.5 * b + 0.5 * s)
    assert not any(p.requires_grad for p in state.teacher.parameters())


# -- losses in a step ---------------------------------------------------------

def test_all_ablations_give_dgm_only(encoded):
    cfg = tiny_cfg(ablations=["LMA", "MGCA", "PMM", "HNP"])
    state = init_state(cfg, 10)
    b = compute_losses(state.model, state.teacher, encoded.batch(range(8)), cfg).as_dict()
    assert b["l_lma"] == 0.0 and b["l_mgca"] == 0.0 and b["l_pmm"] == 0.0
    assert b["total"] == pytest.approx(b["l_dgm"], abs=1e-12)


def test_bundle_finite_and_composed(encoded):
    cfg = tiny_cfg()
    state = init_state(cfg, 10)
    for start in range(0, 48, 8):
        b = compute_losses(state.model, state.teacher, encoded.batch(range(start, start + 8)), cfg).as_dict()
        assert all(math.isfinite(v) and v >= 0 for v in b.values())
        want = b["l_dgm"] + b["l_lma"] + 0.1 * b["l_mgca"] + 0.01 * b["l_pmm"]
        assert abs(b["total"] - want) < 1e-6


def test_lma_ablation_skips_auxiliary_text(samples):
    # without LMA the auxiliary texts are never read
    cfg = tiny_cfg(ablations=["LMA"])
    data = EncodedDataset(samples[:8], cfg.model_config(), with_aux=False)
    state = init_state(cfg, 10)
    b = compute_losses(state.model, state.teacher, data.batch(range(8)), cfg).as_dict()
    assert b["l_vlc"] == 0.0 and b["l_ied"] == 0.0


def test_hnp_ablation_uses_all_negatives(encoded):
    manip = [i for i in range(len(encoded)) if bool(encoded.img_manip[i])]
    i = manip[0]
    hnp, plain = encoded.patch_ind[True][i], encoded.patch_ind[False][i]
    assert (plain != -1).all()
    assert (hnp == -1).any()
    assert torch.equal(hnp == 1, plain == 1)


def test_step_decreases_loss_on_frozen_batch(encoded):
    improved = 0
    for seed in range(20):
        cfg = tiny_cfg(seed=seed, warmup_steps=0, lr_peak=1e-4, lr_floor=1e-6, alpha_mom=0.0)
        state = init_state(cfg, 1000)
        batch = encoded.batch(range(16))
        torch.manual_seed(seed)
        before = compute_losses(state.model, None, batch, cfg).as_dict()["total"]
        train_step(batch, state, cfg)
        after = compute_losses(state.model, None, batch, cfg).as_dict()["total"]
        improved += after < before
    assert improved >= 19


def test_non_finite_loss_aborts_with_dump(encoded, tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg, 10)
    with torch.no_grad():
        state.model.bbox_head[0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        train_step(encoded.batch(range(8)), state, cfg, dump_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0 and "l_img" in dump["losses"]


# -- loop and evaluation -----------------------------------------------------------

def test_fit_is_reproducible_and_logs(samples, tmp_path):
    cfg = tiny_cfg(epochs=2)
    s1, h1 = fit(samples[:32], samples[32:], cfg, out_dir=tmp_path / "a")
    s2, h2 = fit(samples[:32], samples[32:], cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "steps.jsonl").read_text() == (tmp_path / "b" / "steps.jsonl").read_text()
    assert h1[-1]["val"] == h2[-1]["val"]
    lines = (tmp_path / "a" / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "l_mgca" in json.loads(lines[0])
    assert (tmp_path / "a" / "last.pt").exists() and (tmp_path / "a" / "best.pt").exists()
    assert s1.step == 8


def test_fit_all_ablated_logs_zero_mgca(samples, tmp_path):
    cfg = tiny_cfg(ablations=["LMA", "MGCA", "PMM", "HNP"])
    fit(samples[:16], None, cfg, out_dir=tmp_path)
    for line in (tmp_path / "steps.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert row["l_mgca"] == 0.0 and row["l_pmm"] == 0.0 and row["l_lma"] == 0.0


def test_evaluate_ignores_auxiliary_text(samples):
    state = init_state(tiny_cfg(), 1)
    recs_a, table_a = evaluate(state.model, samples)
    stripped = [type(s)(**{**s.__dict__, "caption": "", "explanation": "", "scene": None}) for s in samples]
    recs_b, table_b = evaluate(state.model, stripped)
    assert [r.to_json() for r in recs_a] == [r.to_json() for r in recs_b]
    assert table_a.keys() == table_b.keys() and len(table_a) == 12
    for k in table_a:
        assert table_a[k] == table_b[k] or (math.isnan(table_a[k]) and math.isnan(table_b[k]))


def test_evaluate_record_lengths_follow_real_tokens(samples):
    state = init_state(tiny_cfg(), 1)
    recs, _ = evaluate(state.model, samples[:5])
    for r, s in zip(recs, samples[:5]):
        assert len(r.s_tok) == len(r.y_tok) == len(s.text_ids)


def test_token_teacher_probabilities(encoded):
    state = init_state(tiny_cfg(), 1)
    b = encoded.batch(range(4))
    img = state.model.encode_image(b["images"])
    txt = state.model.encode_text(b["ids"], b["mask"])
    probs = state.teacher.token_probs(txt, img)
    assert torch.allclose(probs.sum(-1), torch.ones(probs.shape[:-1]), atol=1e-6)
    assert isinstance(state.teacher, TokenTeacher)
