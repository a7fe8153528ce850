"""Command-line entry point: ``sidgan <subcommand> [--preset toy] [--config FILE] ...``.

Every subcommand writes into ``--out`` and is deterministic in (config, seed).
Relative data paths resolve against ``SIDGAN_DATA_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics, presets, toy
from .domains import DomainData, read_item
from .experiments import AblationSpec, forward_data, plot_ablation, run_ablation, write_ablation_csv
from .isp import IspConfig, RawFrame, preprocess
from .nets import ModelBundle, build_unet
from .synthesis import synthesize_dataset
from .tensorio import (
    DatasetManifest,
    ManifestEntry,
    ManifestSet,
    load_checkpoint,
    load_manifest,
    save_manifest,
    write_tensor,
)
from .training import (
    TrainTrace,
    evaluate_forward,
    forward_predict,
    select_model_by_kid,
    train_cyclegan_ab,
    train_cyclegan_bc,
    train_forward,
)

log = logging.getLogger("sidgan")

SUBCOMMANDS = ("preprocess", "train-ab", "train-bc", "synthesize", "train-forward", "evaluate", "ablate", "report")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    run_id: str
    subcommand: str
    doc: dict
    output_dir: Path
    checkpoints: dict[str, str] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def claim_output_dir(self) -> None:
        """Record the run in ``run.json``; a different run already there is an error."""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        marker = self.output_dir / "run.json"
        if marker.exists():
            prev = json.loads(marker.read_text()).get("run_id")
            if prev != self.run_id:
                raise ConfigError(f"{self.output_dir} already holds run {prev!r}")
        payload = {"run_id": self.run_id, "subcommand": self.subcommand, "config": self.doc,
                   "checkpoints": self.checkpoints}
        marker.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str))


def data_path(p) -> Path:
    """Resolve a data path: absolute or cwd-relative if it exists, else under SIDGAN_DATA_ROOT."""
    p = Path(p)
    if p.is_absolute() or p.exists():
        return p
    root = os.environ.get("SIDGAN_DATA_ROOT")
    return Path(root) / p if root else p


def _manifest(rc: RunConfig, key: str | None = None) -> ManifestSet:
    data = rc.doc["data"]
    path = data.get(key) if key else data.get("manifest")
    if path is None:
        if key is None and data.get("toy") is not None:
            path = rc.output_dir / "toy_data" / "manifest.json"
            if not path.exists():
                toy.write_toy_dataset(path.parent, seed=rc.seed, **data["toy"])
        else:
            raise ConfigError(f"config lacks data.{key or 'manifest'}")
    path = data_path(path)
    if not path.exists():
        raise ConfigError(f"manifest {path} does not exist")
    ms = load_manifest(path)
    for m in ms.sections.values():
        for e in m:
            if not ms.resolve(e).exists():
                raise ConfigError(f"manifest {path}: missing data for {e.id} at {ms.resolve(e)}")
    return ms


def _domain(ms: ManifestSet, domain: str, split: str, keep: Callable[[ManifestEntry], bool] = lambda e: True):
    entries = [e for e in ms.get(domain, split) if keep(e)]
    return DomainData(
        domain,
        [e.id for e in entries],
        [read_item(ms.resolve(e), e.frame_count) for e in entries],
        [e.exposure_seconds for e in entries],
        [e.pair_id for e in entries],
        [bool(e.extra.get("static", False)) for e in entries],
    )


def _still(e: ManifestEntry) -> bool:
    return e.frame_count == 1


def _bundle(doc: dict) -> ModelBundle:
    return ModelBundle.build(presets.generator_spec(doc), presets.discriminator_spec(doc),
                             presets.forward_spec(doc), seed=doc["seed"])


def _checkpoint_dir(path, prefer: str | None = None) -> Path:
    """Epoch directory from an epoch dir or a run dir (via ``selected.json``, else the last epoch)."""
    p = data_path(path)
    if (p / "metrics.json").exists():
        return p
    sel = p / "selected.json"
    if sel.exists():
        return p / json.loads(sel.read_text())["checkpoint"]
    epochs = sorted(p.glob("epoch_*"), key=lambda d: int(d.name.split("_")[1]))
    if prefer:
        epochs = [d for d in epochs if (d / f"{prefer}.sgt").exists()]
    if not epochs:
        raise ConfigError(f"no checkpoint under {p}")
    return epochs[-1]


def _load_module(module: torch.nn.Module, path, model_id: str) -> str:
    d = _checkpoint_dir(path, model_id)
    if not (d / f"{model_id}.sgt").exists():
        raise ConfigError(f"checkpoint {d} has no {model_id}")
    load_checkpoint(d.parent, int(d.name.split("_")[1]), {model_id: module})
    return f"{d.parent.name}/{d.name}/{model_id}"


def _write_selected(run_dir: Path, trace: TrainTrace, record) -> None:
    payload = {"checkpoint": f"epoch_{record.epoch}", "epoch": record.epoch, "model_id": record.model_id,
               "metrics": record.metrics}
    (run_dir / "selected.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(rc: RunConfig) -> ManifestSet:
    """Run the ISP over a raw manifest of uint16 mosaics.

    Raw entries carry ``extra = {cfa, black, white}``; video entries hold a
    (T, H, W) mosaic stack. Short exposures are brightened by the
    long/short ratio only when ``preprocess.ev_scale`` is set.
    """
    pc = rc.doc["preprocess"]
    if not pc.get("raw_manifest"):
        raise ConfigError("preprocess needs preprocess.raw_manifest")
    raw = load_manifest(data_path(pc["raw_manifest"]))
    if not any(len(m) for m in raw.sections.values()):
        raise ConfigError("raw manifest is empty")
    cfg = IspConfig(**pc.get("isp", {}))
    ev_scale = bool(pc.get("ev_scale", False))
    out = rc.output_dir
    sections = {}
    for key, m in raw.sections.items():
        other = {}
        if m.domain == "C":
            other = {e.id: e for e in raw.get("B", m.split)}
        entries = []
        for e in m:
            mosaic = _read_raw(raw, e)
            long_exp = None
            if ev_scale and e.pair_id in other:
                long_exp = other[e.pair_id].exposure_seconds
            frames = [
                preprocess(RawFrame(fr, e.extra.get("cfa", "RGGB"), int(e.extra.get("black", 0)),
                                    int(e.extra.get("white", 1023)), e.exposure_seconds or 1.0), cfg, long_exp)
                for fr in (mosaic if mosaic.ndim == 3 else mosaic[None])
            ]
            arr = np.stack(frames) if mosaic.ndim == 3 else frames[0]
            rel = f"{m.domain}/{m.split}/{e.id}.sgt"
            write_tensor(out / rel, arr.astype(np.float32))
            extra = {k: v for k, v in e.extra.items() if k not in ("cfa", "black", "white")}
            extra.update({"ev_scaled": long_exp is not None, "isp": {"digital_gain": cfg.digital_gain,
                                                                     "bin": cfg.bin}})
            entries.append(ManifestEntry(e.id, rel, e.kind, e.frame_count, e.exposure_seconds, e.pair_id, extra))
        sections[key] = DatasetManifest(m.domain, m.split, tuple(entries))
    ms = ManifestSet(sections, out)
    save_manifest(out / "manifest.json", ms)
    return ms


def _read_raw(ms: ManifestSet, e: ManifestEntry) -> np.ndarray:
    from .tensorio import read_tensor

    a = read_tensor(ms.resolve(e))
    if a.dtype != np.uint16:
        raise ConfigError(f"raw entry {e.id} must be uint16, got {a.dtype}")
    return a


def cmd_train_ab(rc: RunConfig) -> TrainTrace:
    doc = rc.doc
    ms = _manifest(rc)
    data_a = _domain(ms, "A", "train")
    data_b = _domain(ms, "B", "train", _still)
    val_a, val_b = _domain(ms, "A", "val"), _domain(ms, "B", "val", _still)
    bundle = _bundle(doc)
    have_val = len(val_a) > 1 and len(val_b) > 1
    trace = train_cyclegan_ab(bundle, data_a, data_b, presets.train_config(doc, "train_ab"),
                              presets.loss_weights(doc, "weights_ab"),
                              val_a if have_val else None, val_b if have_val else None, run_dir=rc.output_dir)
    rec = select_model_by_kid(trace) if have_val else trace.checkpoints[-1]
    _write_selected(rc.output_dir, trace, rec)
    return trace


def cmd_train_bc(rc: RunConfig) -> TrainTrace:
    doc = rc.doc
    ms = _manifest(rc)

    def pairs(split):
        ids = [b.id for b, c in ms.pairs(split) if b.frame_count == 1 and c.frame_count == 1]
        keep_c = {c.id for b, c in ms.pairs(split) if b.id in set(ids)}
        return (_domain(ms, "B", split, lambda e: e.id in ids),
                _domain(ms, "C", split, lambda e: e.id in keep_c))

    data_b, data_c = pairs("train")
    val_b, val_c = pairs("val")
    bundle = _bundle(doc)
    have_val = len(val_b) > 0
    trace = train_cyclegan_bc(bundle, data_b, data_c, presets.train_config(doc, "train_bc"),
                              presets.loss_weights(doc, "weights_bc"),
                              val_b if have_val else None, val_c if have_val else None, run_dir=rc.output_dir)
    _write_selected(rc.output_dir, trace, trace.checkpoints[-1])
    return trace


def cmd_synthesize(rc: RunConfig) -> ManifestSet:
    doc = rc.doc
    for k in ("g_ab", "g_bc"):
        if k not in rc.checkpoints:
            raise ConfigError(f"synthesize needs --checkpoint {k}=PATH")
    gen = presets.generator_spec(doc)
    torch.manual_seed(doc["seed"])
    g_ab, g_bc = build_unet(gen), build_unet(gen)
    ids = (_load_module(g_ab, rc.checkpoints["g_ab"], "g_ab"), _load_module(g_bc, rc.checkpoints["g_bc"], "g_bc"))
    ms = _manifest(rc)
    data_a = _domain(ms, "A", "train")
    count = doc["synthesize"].get("count") or len(data_a)
    return synthesize_dataset(data_a, g_ab, g_bc, rc.output_dir, int(count), ids, doc["synthesize"]["split"])


def _forward_sources(rc: RunConfig, cfg) -> dict:
    ms = _manifest(rc)
    sources = {"real": forward_data(ms, "train")}
    needs_synth = any(s.data_source == "synthetic" and s.epochs for s in cfg.plan.stages)
    if needs_synth:
        synth_path = rc.doc["data"].get("synthetic_manifest")
        if not synth_path:
            raise ConfigError("the plan has a synthetic stage; set data.synthetic_manifest")
        synth = forward_data(load_manifest(data_path(synth_path)), rc.doc["synthesize"]["split"])
        n = min(len(synth), cfg.synthetic_count(len(sources["real"])))
        sources["synthetic"] = synth.subset(synth.ids[:n])
    return sources


def cmd_train_forward(rc: RunConfig) -> TrainTrace:
    doc = rc.doc
    cfg = presets.forward_config(doc)
    sources = _forward_sources(rc, cfg)
    ms = _manifest(rc)
    split = doc["evaluate"]["split"]
    test = forward_data(ms, split) if ms.pairs(split) else None
    bundle = ModelBundle(forward_model=_bundle(doc).forward_model)
    fi = doc["evaluate"]["frame_index"]
    evaluate = (lambda m: evaluate_forward(m, test, fi)) if test is not None else None
    trace = train_forward(bundle, sources, cfg, run_dir=rc.output_dir, evaluate=evaluate)
    _write_selected(rc.output_dir, trace, trace.checkpoints[-1])
    return trace


class _Identity(torch.nn.Module):
    def forward(self, x):
        return x


def _flow_for(flow_cfg, clip_id: str):
    if flow_cfg in (None, "zero"):
        return metrics.zero_flow
    from .tensorio import read_tensor

    return metrics.PrecomputedFlow(read_tensor(data_path(flow_cfg) / f"{clip_id}.sgt"))


def cmd_evaluate(rc: RunConfig) -> list[metrics.MetricReport]:
    """Fifth-frame image metrics, temporal metrics, FID/KID and warping error on one split."""
    doc = rc.doc
    ec = doc["evaluate"]
    ckpt = rc.checkpoints.get("forward_model")
    if ckpt is None:
        raise ConfigError("evaluate needs --checkpoint forward_model=PATH (or =identity)")
    if ckpt == "identity":
        model, ckpt_id = _Identity(), "identity"
    else:
        model = _bundle(doc).forward_model
        ckpt_id = _load_module(model, ckpt, "forward_model")
    ms = _manifest(rc)
    data = forward_data(ms, ec["split"])
    fi = int(ec["frame_index"])
    scores = evaluate_forward(model, data, fi)
    preds, gts, warps = [], [], []
    from .isp import denormalize

    for k in range(len(data)):
        out = denormalize(forward_predict(model, data.inputs.items[k]))
        tgt = data.target_for(k)
        preds.append(out[fi])
        gts.append(denormalize(tgt[fi if len(tgt) > 1 else 0]))
        warps.append(metrics.warp_error(out, _flow_for(ec.get("flow"), data.ids[k])))
    fid = kid = None
    if len(preds) >= 2:
        ext = metrics.FeatureExtractor()
        fp, fg = ext(np.stack(preds) * 2 - 1), ext(np.stack(gts) * 2 - 1)
        fid, kid = metrics.fid(fp, fg), metrics.kid(fp, fg)
    report = metrics.MetricReport(ckpt_id, ec["split"], len(data), scores["psnr"], scores["ssim"],
                                  scores["tpsnr"], scores["tssim"], fid, kid, float(np.mean(warps)))
    metrics.write_reports(rc.output_dir / "metrics.csv", [report])
    return [report]


def cmd_ablate(rc: RunConfig) -> list[dict]:
    doc = rc.doc
    spec = AblationSpec(**doc["ablate"])
    cfg = presets.forward_config(doc)
    ms = _manifest(rc)
    real = forward_data(ms, "train")
    synthetic = None
    if True in spec.with_synthetic:
        path = doc["data"].get("synthetic_manifest")
        if not path:
            raise ConfigError("the synthetic arm needs data.synthetic_manifest")
        synthetic = forward_data(load_manifest(data_path(path)), doc["synthesize"]["split"])
    test = forward_data(ms, doc["evaluate"]["split"])

    def make_model():
        return _bundle(doc).forward_model

    rows = run_ablation(spec, real, synthetic, test, make_model, cfg, frame_index=doc["evaluate"]["frame_index"])
    write_ablation_csv(rc.output_dir / "ablation.csv", rows)
    plot_ablation(rc.output_dir / "ablation.png", rows)
    return rows


def cmd_report(rc: RunConfig) -> list[dict]:
    """Summarize run directories (``report.inputs``, default: subdirs of --out) into CSV + loss plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    inputs = rc.doc.get("report", {}).get("inputs")
    dirs = [data_path(p) for p in inputs] if inputs else sorted(p for p in rc.output_dir.iterdir() if p.is_dir())
    rows = []
    for d in dirs:
        tr = d / "trace.json"
        if tr.exists():
            trace = json.loads(tr.read_text())
            epochs = trace["epochs"]
            fig, ax = plt.subplots(figsize=(5, 3))
            keys = sorted({k for e in epochs for k in e["losses"]})
            for k in keys:
                ax.plot([e["epoch"] for e in epochs], [e["losses"].get(k, np.nan) for e in epochs], label=k)
            ax.set_xlabel("epoch")
            ax.set_title(f"{d.name} ({trace['kind']})")
            ax.legend(fontsize=6)
            fig.tight_layout()
            fig.savefig(rc.output_dir / f"{d.name}_losses.png", dpi=100)
            plt.close(fig)
            last = epochs[-1] if epochs else {"epoch": -1, "losses": {}}
            rows.append({"run": d.name, "kind": trace["kind"], "epochs": len(epochs),
                         "final_total": last["losses"].get("total", ""),
                         "checkpoints": len(trace["checkpoints"])})
        mc = d / "metrics.csv"
        if mc.exists():
            for r in metrics.read_reports(mc):
                rows.append({"run": d.name, "kind": "evaluate", **r.row()})
    if not rows:
        raise ConfigError("no run directories with trace.json or metrics.csv found")
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(rc.output_dir / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k, "")) for k in cols})
    return rows


COMMANDS: dict[str, Callable[[RunConfig], object]] = {
    "preprocess": cmd_preprocess,
    "train-ab": cmd_train_ab,
    "train-bc": cmd_train_bc,
    "synthesize": cmd_synthesize,
    "train-forward": cmd_train_forward,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=COMMANDS[name].__doc__.splitlines()[0] if COMMANDS[name].__doc__ else None)
        s.add_argument("--config", help="YAML or JSON file layered over the preset")
        s.add_argument("--preset", choices=sorted(presets.PRESETS), help="base preset (default: toy)")
        s.add_argument("--seed", type=int, help="master seed; overrides the config")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH",
                       help="checkpoint for a model id (epoch dir or run dir); repeatable")
        s.add_argument("--run-id", help="run identifier recorded in <out>/run.json")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _parse_checkpoints(items: Sequence[str], command: str) -> dict[str, str]:
    default = {"synthesize": None, "evaluate": "forward_model"}.get(command)
    out = {}
    for item in items:
        if "=" in item:
            k, v = item.split("=", 1)
        elif default:
            k, v = default, item
        else:
            raise ConfigError(f"--checkpoint {item!r}: use NAME=PATH")
        out[k] = v
    return out


def make_run_config(args: argparse.Namespace) -> RunConfig:
    overrides = presets.read_config_file(data_path(args.config)) if args.config else {}
    doc = presets.resolve_config(args.preset, overrides, args.seed)
    run_id = args.run_id or f"{args.command}-{doc['preset']}-seed{doc['seed']}"
    return RunConfig(run_id, args.command, doc, Path(args.out), _parse_checkpoints(args.checkpoint, args.command))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        rc = make_run_config(args)
        rc.claim_output_dir()
        result = COMMANDS[args.command](rc)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"sidgan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, TrainTrace):
        print(f"{args.command}: {len(result.epochs)} epochs, {len(result.checkpoints)} checkpoints -> {rc.output_dir}")
    elif isinstance(result, list) and result and isinstance(result[0], metrics.MetricReport):
        print(json.dumps(result[0].row(), indent=1))
    else:
        print(f"{args.command}: wrote {rc.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
