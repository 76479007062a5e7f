import json

import numpy as np
import pytest
from PIL import Image

from asap import cli
from asap.data.synthetic import generate_dataset
from asap.training import TrainConfig, init_state
from asap.model import save_checkpoint
from asap.viz import render_attention, text_patch_attention

TINY = '{"batch_size": 8, "warmup_steps": 2, "lr_peak": 1e-3, "model": {"embed_dim": 32, "num_heads": 2, "num_layers_unimodal": 1, "num_layers_multimodal": 1}}'


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(root), "--n", "24", "--seed", "4"]) == 0
    return root


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    cfg = TrainConfig.from_dict(json.loads(TINY))
    state = init_state(cfg, 1)
    path = tmp_path_factory.mktemp("ckpt") / "m.pt"
    save_checkpoint(path, state.model)
    return path, state.model


def test_gen_data_writes_manifest(dataset):
    lines = (dataset / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 24
    assert len(list((dataset / "images").iterdir())) == 24


def test_gen_data_bad_mix_is_usage_error(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--n", "4", "--mix", "NONE=0.3"]) == 2


def test_train_ablate_all_logs_zero_mgca(dataset, config_file, tmp_path):
    code = cli.main([
        "train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(config_file),
        "--ablate", "all", "--epochs", "1",
    ])
    assert code == 0
    rows = [json.loads(l) for l in (tmp_path / "losses.jsonl").read_text().splitlines()]
    assert rows and all(r["l_mgca"] == 0.0 for r in rows)
    assert set(json.loads((tmp_path / "config.json").read_text())["ablations"]) == {"LMA", "MGCA", "PMM", "HNP"}


def test_train_missing_data_dir_exits_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_bad_config_exits_2(dataset, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"lr_peak": -1}')
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
    bad.write_text("{oops")
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--ablate", "xyz"]) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_max_steps_limits_training(dataset, config_file, tmp_path):
    assert cli.main([
        "train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(config_file), "--max-steps", "2",
    ]) == 0
    assert len((tmp_path / "steps.jsonl").read_text().splitlines()) == 2


def test_eval_writes_records_and_metrics(dataset, checkpoint, tmp_path):
    path, _ = checkpoint
    assert cli.main(["eval", "--ckpt", str(path), "--data", str(dataset), "--out", str(tmp_path)]) == 0
    table = json.loads((tmp_path / "metrics.json").read_text())
    assert len(table) == 12 and "IoUmean" in table
    assert len((tmp_path / "records.jsonl").read_text().splitlines()) == 24
    assert json.loads((tmp_path / "per_type_f1.json").read_text())


def test_eval_without_auxiliary_fields(dataset, checkpoint, tmp_path):
    path, _ = checkpoint
    stripped = tmp_path / "stripped"
    stripped.mkdir()
    lines = []
    for line in (dataset / "manifest.jsonl").read_text().splitlines():
        entry = json.loads(line)
        entry.pop("caption"), entry.pop("explanation")
        entry["image"] = str(dataset / entry["image"])
        lines.append(json.dumps(entry))
    (stripped / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    assert cli.main(["eval", "--ckpt", str(path), "--data", str(dataset), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["eval", "--ckpt", str(path), "--data", str(stripped), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()


def test_eval_missing_checkpoint_exits_2(dataset, tmp_path):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "x.pt"), "--data", str(dataset), "--out", str(tmp_path)]) == 2


def test_viz_attn_cli(dataset, checkpoint, tmp_path):
    path, _ = checkpoint
    assert cli.main(["viz-attn", "--ckpt", str(path), "--data", str(dataset), "--out", str(tmp_path), "--n", "2"]) == 0
    pngs = list(tmp_path.glob("*_word*.png"))
    assert pngs
    for p in pngs:
        assert Image.open(p).size == (64, 64)
    assert cli.main(["viz-attn", "--ckpt", str(path), "--data", str(dataset), "--out", str(tmp_path),
                     "--sample", "missing-id"]) == 2


def test_render_attention_maps(checkpoint, tmp_path):
    _, model = checkpoint
    sample = next(s for s in generate_dataset(40, seed=9) if s.fake_text_pos and any(s.box_xyxy))
    summary = render_attention(model, sample, tmp_path)
    weights = np.asarray(summary["raw_weights"])
    assert weights.shape == (len(summary["words"]), 64)
    assert np.allclose(weights.sum(-1), 1.0, atol=1e-5)
    for name in summary["word_files"]:
        arr = np.asarray(Image.open(tmp_path / name), dtype=np.float64) / 255.0
        assert arr.shape == (64, 64, 3) and arr.min() >= 0.0 and arr.max() <= 1.0
    assert all(0.0 <= m <= 1.0 for m in summary["mass_in_box"].values())
    w, words = text_patch_attention(model, sample)
    assert w.shape[0] == len(words)
