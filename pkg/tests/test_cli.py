import json
from pathlib import Path

import numpy as np
import pytest
import torch.nn as nn
import yaml

from sidgan import cli, metrics, toy
from sidgan.experiments import forward_data, read_ablation_csv
from sidgan.isp import denormalize, normalize
from sidgan.nets import UNetSpec, build_unet
from sidgan.synthesis import synthesize_dataset
from sidgan.tensorio import (
    DatasetManifest,
    ManifestEntry,
    ManifestSet,
    load_manifest,
    read_tensor,
    save_checkpoint,
    save_manifest,
    write_tensor,
)

GOLDEN = Path(__file__).parent / "golden"

TINY = {
    "data": {"toy": {"n_videos": 3, "n_long": 3, "n_pairs": 3, "n_val": 2, "n_static": 2, "size": 32,
                     "frames": 5}},
    "models": {"generator": {"levels": 2, "base_width": 4}, "forward": {"levels": 2, "base_width": 4},
               "discriminator": {"downsample_layers": 2, "base_width": 4, "input_patch": 16}},
    "train_ab": {"epochs_constant": 1, "epochs_decay": 1, "eval_interval": 1, "crop": 16},
    "train_bc": {"epochs_constant": 1, "epochs_decay": 1, "eval_interval": 1, "crop": 16},
    "forward": {"total_epochs": 3, "phase_boundary": 2, "plan": [1, 1, 1], "real_synth_ratio": [1, 1],
                "crop": 16},
}


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def clip_manifest(root, gt_frames, in_frames, ev_scaled=True, split="test"):
    """One static B/C clip pair under ``root``."""
    write_tensor(root / "gt.sgt", gt_frames)
    write_tensor(root / "in.sgt", in_frames)
    b = ManifestEntry("g0", "gt.sgt", "image", 1, 1.0, "i0", {"static": True})
    c = ManifestEntry("i0", "in.sgt", "video", len(in_frames), 0.1, "g0", {"static": True, "ev_scaled": ev_scaled})
    ms = ManifestSet({("B", split): DatasetManifest("B", split, (b,)),
                      ("C", split): DatasetManifest("C", split, (c,))}, root)
    save_manifest(root / "manifest.json", ms)
    return root / "manifest.json"


def test_evaluate_identity_on_identical_fixture(tmp_path, capsys):
    img = toy.make_long_images(1, size=32, seed=0).items[0][0]
    man = clip_manifest(tmp_path, img, np.repeat(img[None], 7, 0))
    cfg = write_config(tmp_path / "c.yaml", {"data": {"manifest": str(man)}})
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "ev", "--checkpoint", "forward_model=identity") == 0
    rep = metrics.read_reports(tmp_path / "ev" / "metrics.csv")[0]
    assert rep.psnr == 100.0
    assert rep.ssim == pytest.approx(1.0, abs=1e-12)
    assert rep.tpsnr == 100.0 and rep.e_warp == 0.0
    assert json.loads(capsys.readouterr().out)["psnr"] == 100.0


def test_evaluate_three_frame_clip_is_protocol_error(tmp_path, capsys):
    img = np.zeros((32, 32, 3), np.float32)
    man = clip_manifest(tmp_path, img, np.zeros((3, 32, 32, 3), np.float32))
    cfg = write_config(tmp_path / "c.yaml", {"data": {"manifest": str(man)}})
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "ev", "--checkpoint", "identity") == 2
    assert "protocol needs frame 5" in capsys.readouterr().err
    assert not (tmp_path / "ev" / "metrics.csv").exists()


def test_evaluate_matches_direct_metric_calls(tmp_path):
    rng = np.random.default_rng(0)
    gt = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    short = np.clip(gt[None] + rng.normal(0, 0.1, (6, 32, 32, 3)), -1, 1).astype(np.float32)
    man = clip_manifest(tmp_path, gt, short)
    spec = UNetSpec(levels=2, base_width=4)
    net = build_unet(spec, init_std=0.2)
    save_checkpoint(tmp_path / "fw", 7, {"forward_model": net})
    cfg = write_config(tmp_path / "c.yaml", {"data": {"manifest": str(man)},
                                             "models": {"forward": {"levels": 2, "base_width": 4}}})
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "ev", "--checkpoint", tmp_path / "fw" / "epoch_7") == 0
    rep = metrics.read_reports(tmp_path / "ev" / "metrics.csv")[0]
    from sidgan.training import translate

    out = denormalize(translate(net, short))
    assert rep.psnr == pytest.approx(metrics.psnr(out[4], denormalize(gt)), abs=1e-9)
    assert rep.ssim == pytest.approx(metrics.ssim(out[4], denormalize(gt)), abs=1e-9)
    assert rep.e_warp == pytest.approx(metrics.warp_error(out), abs=1e-12)
    assert rep.checkpoint_id.endswith("epoch_7/forward_model")


def test_evaluate_missing_checkpoint(tmp_path):
    img = np.zeros((32, 32, 3), np.float32)
    man = clip_manifest(tmp_path, img, np.zeros((7, 32, 32, 3), np.float32))
    cfg = write_config(tmp_path / "c.yaml", {"data": {"manifest": str(man)}})
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "a") == 2
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "b", "--checkpoint", tmp_path / "nowhere") == 2


def raw_manifest(root, fixture):
    p = json.loads((GOLDEN / fixture / "params.json").read_text())
    mosaic = read_tensor(GOLDEN / fixture / "mosaic.sgt")
    write_tensor(root / "m.sgt", mosaic)
    raw = {"cfa": p["cfa"], "black": p["black"], "white": p["white"]}
    b = ManifestEntry("L", "m.sgt", "image", 1, p["long"], "S", raw)
    c = ManifestEntry("S", "m.sgt", "image", 1, p["short"], "L", raw)
    ms = ManifestSet({("B", "train"): DatasetManifest("B", "train", (b,)),
                      ("C", "train"): DatasetManifest("C", "train", (c,))}, root)
    save_manifest(root / "raw.json", ms)
    return root / "raw.json", p


def test_preprocess_golden_and_rerun(tmp_path):
    man, p = raw_manifest(tmp_path, "random_32x32_gain")
    cfg = write_config(tmp_path / "c.yaml", {"preprocess": {"raw_manifest": str(man), "ev_scale": True,
                                                            "isp": {"digital_gain": p["gain"], "bin": False}}})
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "pp") == 0
    out = load_manifest(tmp_path / "pp" / "manifest.json")
    short = read_tensor(out.resolve(out.get("C", "train").entries[0]))
    golden = normalize(read_tensor(GOLDEN / "random_32x32_gain" / "ev.sgt"))
    assert short.dtype == np.float32
    assert np.array_equal(short, golden.astype(np.float32))
    assert out.get("C", "train").entries[0].extra["ev_scaled"] is True
    first = (tmp_path / "pp" / "C" / "train" / "S.sgt").read_bytes()
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "pp") == 0
    assert (tmp_path / "pp" / "C" / "train" / "S.sgt").read_bytes() == first


def test_preprocess_empty_manifest(tmp_path):
    save_manifest(tmp_path / "raw.json", ManifestSet({}, tmp_path))
    cfg = write_config(tmp_path / "c.yaml", {"preprocess": {"raw_manifest": str(tmp_path / "raw.json")}})
    assert run("preprocess", "--config", cfg, "--out", tmp_path / "pp") == 2


def test_invalid_manifest_is_launch_error(tmp_path, capsys):
    img = np.zeros((32, 32, 3), np.float32)
    man = clip_manifest(tmp_path, img, np.zeros((7, 32, 32, 3), np.float32))
    (tmp_path / "in.sgt").unlink()
    cfg = write_config(tmp_path / "c.yaml", {"data": {"manifest": str(man)}})
    assert run("train-bc", "--config", cfg, "--out", tmp_path / "bc") == 2
    assert "missing data" in capsys.readouterr().err
    cfg2 = write_config(tmp_path / "c2.yaml", {"data": {"manifest": str(tmp_path / "absent.json")}})
    assert run("train-ab", "--config", cfg2, "--out", tmp_path / "ab") == 2


def test_config_errors(tmp_path, monkeypatch):
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["train-ab"])
    cfg = write_config(tmp_path / "c.yaml", {"ablate": {"real_fractions": [0.5, 0.2]}})
    assert run("ablate", "--config", cfg, "--out", tmp_path / "ab") == 2
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "run.json").write_text(json.dumps({"run_id": "other"}))
    assert run("report", "--out", tmp_path / "o") == 2
    monkeypatch.setenv("SIDGAN_DATA_ROOT", str(tmp_path))
    assert cli.data_path("c.yaml") == tmp_path / "c.yaml"
    assert cli.data_path("/abs/x") == Path("/abs/x")


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """Tiny end-to-end chain shared by the remaining CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml", TINY)
    assert run("train-ab", "--config", cfg, "--out", root / "ab") == 0
    assert run("train-bc", "--config", cfg, "--out", root / "bc") == 0
    assert run("synthesize", "--config", cfg, "--out", root / "syn",
               "--checkpoint", f"g_ab={root / 'ab'}", "--checkpoint", f"g_bc={root / 'bc'}") == 0
    doc = {**TINY, "data": {**TINY["data"], "synthetic_manifest": str(root / "syn" / "manifest.json")}}
    cfg2 = write_config(root / "tiny2.yaml", doc)
    return root, cfg, cfg2


def test_training_chain_artifacts(toy_runs):
    root, _, cfg2 = toy_runs
    for d in ("ab", "bc"):
        assert (root / d / "trace.json").exists() and (root / d / "losses.csv").exists()
        assert (root / d / "selected.json").exists()
        assert (root / d / "epoch_1" / "metrics.json").exists()
    sel = json.loads((root / "ab" / "selected.json").read_text())
    assert "kid" in sel["metrics"]
    syn = load_manifest(root / "syn" / "manifest.json")
    assert len(syn.get("B", "train")) == 3
    assert all(e.extra["generators"][0].startswith("ab/epoch_") for e in syn.get("C", "train"))
    assert run("train-forward", "--config", cfg2, "--out", root / "fw") == 0
    trace = json.loads((root / "fw" / "trace.json").read_text())
    assert [b[0] for b in trace["stage_boundaries"]] == ["train_real_static", "finetune_synthetic_dynamic",
                                                         "finetune_real_static"]
    assert run("evaluate", "--config", cfg2, "--out", root / "ev", "--checkpoint", root / "fw") == 0
    assert run("report", "--out", root, "--run-id", "rep") == 0
    assert (root / "report.csv").exists() and (root / "fw_losses.png").exists()


def test_train_forward_needs_synthetic_manifest(toy_runs, tmp_path):
    _, cfg, _ = toy_runs
    assert run("train-forward", "--config", cfg, "--out", tmp_path / "fw") == 2


def test_ablate_single_fraction_two_rows(toy_runs, tmp_path):
    root, _, cfg2 = toy_runs
    doc = yaml.safe_load(Path(cfg2).read_text())
    doc["ablate"] = {"real_fractions": [1.0], "with_synthetic": [False, True]}
    cfg = write_config(tmp_path / "a.yaml", doc)
    assert run("ablate", "--config", cfg, "--out", tmp_path / "abl") == 0
    rows = read_ablation_csv(tmp_path / "abl" / "ablation.csv")
    assert [r["arm"] for r in rows] == ["real_only", "synthetic"]
    assert all(r["fraction"] == 1.0 for r in rows)
    assert rows[0]["n_synthetic"] == 0 and rows[1]["n_synthetic"] > 0
    assert (tmp_path / "abl" / "ablation.png").stat().st_size > 0


def test_synthesize_identity_manifest_feeds_forward_data(tmp_path):
    a = toy.make_videos(2, 32, 5, seed=3)
    synthesize_dataset(a, nn.Identity(), nn.Identity(), tmp_path, 2)
    data = forward_data(load_manifest(tmp_path / "manifest.json"), "train")
    assert len(data) == 2 and not data.static
