"""Command-line entry point: synth, train, sample, eval, ablate, toy.

Every command writes into a fresh output directory. Work happens in a
staging directory next to it that is renamed into place only on success, so
a failed run leaves nothing behind. The effective configuration is echoed to
``config.json`` and the produced files are listed in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import core_types as ct
from .camera import project_array
from .denoiser import DenoiserConfig
from .errors import InvalidValue, IoFailure, MotionLiftError
from .metrics import evaluate, min_mpjpe
from .sampler import SamplerConfig, sample, sample_timing
from .synth import GeneratorConfig, default_camera_rig, generate_motions, render_observations
from .toy_gp import ToyConfig, run_toy
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("motionlift")


class UsageError(Exception):
    """Bad flags or configuration; exit status 2."""


# ---------------------------------------------------------------------------
# configuration

_ABLATE_KEYS = {"instances", "step_counts", "hypothesis_counts", "seeds", "cameras"}
_ABLATE_DEFAULTS = {
    "instances": 5,
    "step_counts": [2, 4, 8, 16, 32, 50],
    "hypothesis_counts": [1, 10, 50, 200],
    "seeds": 1,
    "cameras": ["cam0"],
}
_HIDDEN = {"generator": {"skeleton", "offsets"}}


def _field_names(cls, section: str) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(section, set())


_SECTIONS = {
    "generator": GeneratorConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "toy": ToyConfig,
}


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"config section {where!r} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise UsageError(f"unknown config key {where}.{unknown[0]}")


def load_config(path: str | None) -> dict:
    """Read and strictly validate a JSON config; unknown keys are rejected."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    _check_keys(cfg, set(_SECTIONS) | {"ablate", "seed", "out"}, "<root>")
    for name, cls in _SECTIONS.items():
        if name in cfg:
            _check_keys(cfg[name], _field_names(cls, name), name)
    if "model" in cfg.get("train", {}):
        _check_keys(cfg["train"]["model"], _field_names(DenoiserConfig, "model"), "train.model")
    if "ablate" in cfg:
        _check_keys(cfg["ablate"], _ABLATE_KEYS, "ablate")
    return cfg


def _build(cls, section: dict, overrides: dict):
    values = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    for k, v in list(values.items()):
        if isinstance(v, list) and k.endswith(("band", "sinusoids")):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.name not in ("skeleton", "offsets")}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("an explicit seed is required (--seed or \"seed\" in the config)")
    if not isinstance(seed, int) or seed < 0:
        raise UsageError("seed must be a non-negative integer")
    return seed


# ---------------------------------------------------------------------------
# output handling

class Output:
    """Staging directory that becomes ``final`` only when the command succeeds."""

    def __init__(self, final: str):
        self.final = Path(final)
        if self.final.exists() and (not self.final.is_dir() or any(self.final.iterdir())):
            raise UsageError(f"output directory {final} exists and is not empty")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        self.files: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(rel)
        return p

    def write_json(self, rel: str, obj) -> None:
        self.path(rel).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, rel: str, header: list[str], rows) -> None:
        with open(self.path(rel), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    def commit(self, command: str, config: dict) -> None:
        self.write_json("config.json", config)
        manifest = {"command": command, "files": sorted(set(self.files) | {"manifest.json"})}
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if self.final.exists():
            self.final.rmdir()
        os.replace(self.dir, self.final)

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


# ---------------------------------------------------------------------------
# dataset layout produced by `synth`

def _read_manifest(data_dir: str) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise IoFailure(f"{data_dir}: no manifest.json (expected a `synth` output directory)")
    return json.loads(path.read_text())


def _dataset_items(data_dir: str) -> list[str]:
    manifest = _read_manifest(data_dir)
    names = sorted(Path(f).stem for f in manifest["files"] if f.startswith("motions/"))
    if not names:
        raise IoFailure(f"{data_dir}: dataset lists no motions")
    return names


def _load_instance(data_dir: str, name: str, cameras: list[str] | None):
    root = Path(data_dir)
    gt = ct.read_motion(root / "motions" / f"{name}.mseq")
    obs = ct.read_observations(root / "observations" / f"{name}.obs2d")
    pairs = _select_cameras(obs, root / "cameras", cameras)
    return gt, pairs


def _select_cameras(obs, camera_dir: Path, cameras: list[str] | None):
    by_id = {o.camera_id: o for o in obs}
    ids = cameras or [o.camera_id for o in obs]
    missing = [c for c in ids if c not in by_id]
    if missing:
        raise UsageError(f"camera {missing[0]!r} not in observations ({sorted(by_id)})")
    return [(by_id[c], ct.read_camera(camera_dir / f"{c}.json")) for c in ids]


def _oracle_keypoints(gt: ct.MotionSequence, pairs):
    out = []
    for obs, cam in pairs:
        px = project_array(gt.positions, gt.root_trajectory, cam).pixels
        out.append(ct.Observation2D(obs.camera_id, np.nan_to_num(px), obs.confidence))
    return out


def _apply_confidence_mode(pairs, mode: str):
    if mode == "ones":
        return [(o.with_confidence(np.ones_like(o.confidence)), c) for o, c in pairs]
    return pairs


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg: dict, out: Output) -> dict:
    seed = _seed(args, cfg)
    gen = _build(GeneratorConfig, cfg.get("generator", {}),
                 {"seed": seed, "n_sequences": args.n_sequences, "frames": args.frames,
                  "noise_std_2d": args.noise})
    cams = default_camera_rig(args.num_cameras)
    ids = [f"cam{i}" for i in range(len(cams))]
    for cid, cam in zip(ids, cams):
        ct.write_camera(cam, out.path(f"cameras/{cid}.json"))
    children = np.random.SeedSequence([seed, 1]).spawn(gen.n_sequences)
    for i, (seq, ss) in enumerate(zip(generate_motions(gen), children)):
        obs = render_observations(seq, cams, gen.noise_std_2d, np.random.default_rng(ss), ids)
        ct.write_motion(seq, out.path(f"motions/seq_{i:05d}.mseq"))
        ct.write_observations(obs, out.path(f"observations/seq_{i:05d}.obs2d"))
    return {"seed": seed, "generator": gen, "num_cameras": len(cams)}


def cmd_train(args, cfg: dict, out: Output) -> dict:
    seed = _seed(args, cfg)
    names = _dataset_items(args.data)
    data = [ct.read_motion(Path(args.data) / "motions" / f"{n}.mseq") for n in names]
    tcfg = _build(TrainConfig, cfg.get("train", {}), {"seed": seed, "steps": args.steps})
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(data, tcfg, resume=resume, log_every=args.log_every)
    save_checkpoint(ckpt, out.path("checkpoint.plty"))
    out.write_csv("loss.csv", ["step", "loss"],
                  ((i + 1, repr(v)) for i, v in enumerate(ckpt.loss_history)))
    return {"seed": seed, "train": tcfg, "data": str(args.data), "resume": args.resume}


def _sampler_config(args, cfg: dict, seed: int) -> SamplerConfig:
    if args.hypotheses is not None and args.hypotheses < 1:
        raise UsageError("--hypotheses must be >= 1")
    return _build(SamplerConfig, cfg.get("sampler", {}),
                  {"seed": seed, "N": args.hypotheses, "T": args.steps, "S": args.skip,
                   "n": args.stride, "lam": args.lam, "k": args.k})


def cmd_sample(args, cfg: dict, out: Output) -> dict:
    seed = _seed(args, cfg)
    scfg = _sampler_config(args, cfg, seed)
    ckpt = load_checkpoint(args.checkpoint)
    cameras = args.cameras.split(",") if args.cameras else None
    pairs = _select_cameras(ct.read_observations(args.obs), Path(args.camera_dir), cameras)
    root_src = ct.read_motion(args.root)
    gt = ct.read_motion(args.gt) if args.gt else None
    oracle = None
    if args.confidence_mode == "oracle":
        if gt is None:
            raise UsageError("--confidence-mode oracle needs --gt")
        oracle = _oracle_keypoints(gt, pairs)
    pairs = _apply_confidence_mode(pairs, args.confidence_mode)
    h, lam = sample(ckpt, pairs, root_src.root_trajectory, scfg, root_src.root_index,
                    observation_ref=str(args.obs), return_lambda=True, oracle_keypoints=oracle)
    for i, seq in enumerate(h.hypotheses):
        ct.write_motion(seq, out.path(f"hypotheses/h_{i:04d}.mseq"))
    report = {"n_hypotheses": len(h), "cameras": [o.camera_id for o, _ in pairs],
              "final_lambda": {"min": float(lam.min()), "max": float(lam.max())}}
    if gt is not None:
        report["metrics"] = dataclasses.asdict(evaluate(h, gt))
    out.write_json("report.json", report)
    return {"seed": seed, "sampler": scfg, "checkpoint": args.checkpoint, "obs": args.obs,
            "root": args.root, "gt": args.gt, "confidence_mode": args.confidence_mode}


def cmd_eval(args, cfg: dict, out: Output) -> dict:
    h = ct.read_hypotheses(args.hypotheses)
    gt = ct.read_motion(args.gt)
    report = evaluate(h, gt, procrustes_scale=not args.no_scale)
    out.path("report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return {"hypotheses": args.hypotheses, "gt": args.gt, "procrustes_scale": not args.no_scale}


def _ablate_settings(args, cfg: dict) -> dict:
    s = {**_ABLATE_DEFAULTS, **cfg.get("ablate", {})}
    if args.instances is not None:
        s["instances"] = args.instances
    if args.values:
        key = {"steps": "step_counts", "hypotheses": "hypothesis_counts"}.get(args.kind)
        if key is None:
            raise UsageError("--values applies to the steps and hypotheses ablations")
        s[key] = [int(v) for v in args.values.split(",")]
    if args.cameras:
        s["cameras"] = args.cameras.split(",")
    if any(n < 1 for n in s["hypothesis_counts"]):
        raise UsageError("hypothesis counts must be >= 1")
    return s


def cmd_ablate(args, cfg: dict, out: Output) -> dict:
    seed = _seed(args, cfg)
    settings = _ablate_settings(args, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    names = _dataset_items(args.data)[:settings["instances"]]
    instances = [_load_instance(args.data, n, settings["cameras"]) for n in names]
    base = _build(SamplerConfig, cfg.get("sampler", {}), {"seed": seed})
    seeds = [seed + i for i in range(settings["seeds"])]

    if args.kind == "steps":
        acc: dict[int, list] = {}
        for gt, pairs in instances:
            for s in seeds:
                rows = sample_timing(ckpt, pairs, gt, dataclasses.replace(base, seed=s),
                                     settings["step_counts"])
                for r in rows:
                    acc.setdefault(r["steps"], []).append(r)
        out.write_csv("steps.csv", ["steps", "T", "S", "wall_time", "min_mpjpe"],
                      ([k, v[0]["T"], v[0]["S"], np.mean([r["wall_time"] for r in v]),
                        np.mean([r["min_mpjpe"] for r in v])] for k, v in sorted(acc.items())))
    elif args.kind == "hypotheses":
        counts = sorted(settings["hypothesis_counts"])
        errs = {n: [] for n in counts}
        for gt, pairs in instances:
            for s in seeds:
                # hypothesis streams are prefix-stable, so smaller N are prefixes of the largest run
                h = sample(ckpt, pairs, gt.root_trajectory,
                           dataclasses.replace(base, seed=s, N=counts[-1]), gt.root_index)
                for n in counts:
                    errs[n].append(min_mpjpe(h.positions[:n], gt)[0])
        out.write_csv("hypotheses.csv", ["N", "min_mpjpe"],
                      ([n, np.mean(errs[n])] for n in counts))
    else:
        rows = []
        for name, (gt, pairs) in zip(names, instances):
            for s in seeds:
                cfg_s = dataclasses.replace(base, seed=s)
                for mode in ("off", "on"):
                    use = _apply_confidence_mode(pairs, "ones")
                    oracle = _oracle_keypoints(gt, pairs) if mode == "on" else None
                    h = sample(ckpt, use, gt.root_trajectory, cfg_s, gt.root_index,
                               oracle_keypoints=oracle)
                    rep = evaluate(h, gt)
                    rows.append([name, s, mode, rep.min_mpjpe, rep.ece])
        out.write_csv("confidence.csv", ["instance", "seed", "confidence", "min_mpjpe", "ece"], rows)
    return {"seed": seed, "kind": args.kind, "ablate": settings, "sampler": base,
            "checkpoint": args.checkpoint, "data": args.data}


def cmd_toy(args, cfg: dict, out: Output) -> dict:
    from scipy.stats import wilcoxon

    seed = _seed(args, cfg)
    section = dict(cfg.get("toy", {}))
    for key in ("grid", "x_obs", "y_obs"):
        if key in section and section[key] is not None:
            section[key] = np.asarray(section[key], float)
    base = _build(ToyConfig, section, {"seed": seed})
    runs = [run_toy(dataclasses.replace(base, seed=seed + i)) for i in range(args.seeds)]

    first = runs[0]
    header = ["x", "mean", "std"] + [f"sample_{i}" for i in range(first["consistent"].shape[0])]
    out.write_csv("posterior.csv", header,
                  ([x, m, s, *col] for x, m, s, col in
                   zip(base.grid, first["mean"], first["std"], first["consistent"].T)))
    out.write_csv("shuffled.csv", ["x"] + header[3:],
                  ([x, *col] for x, col in zip(base.grid, first["shuffled"].T)))
    per_seed = [[seed + i, v, *r["strategies"][v]] for i, r in enumerate(runs)
                for v in ("consistent", "shuffled")]
    out.write_csv("strategies_per_seed.csv", ["seed", "variant", "strategy1", "strategy2"], per_seed)
    table = []
    for v in ("consistent", "shuffled"):
        vals = np.array([row[2:] for row in per_seed if row[1] == v])
        table.append([v, vals[:, 0].mean(), vals[:, 1].mean()])
    out.write_csv("strategies.csv", ["variant", "strategy1", "strategy2"], table)
    summary = {"seeds": args.seeds}
    if args.seeds > 1:
        s2 = {v: [row[3] for row in per_seed if row[1] == v] for v in ("consistent", "shuffled")}
        summary["strategy2_one_sided_p"] = float(
            wilcoxon(s2["shuffled"], s2["consistent"], alternative="greater").pvalue)
    out.write_json("summary.json", summary)
    return {"seed": seed, "toy": base, "seeds": args.seeds}


# ---------------------------------------------------------------------------
# argument parsing

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionlift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--seed", type=int, help="random seed (required unless set in the config)")
        p.add_argument("--out", required=out_required, help="output directory (must not exist)")

    p = sub.add_parser("synth", help="generate synthetic motions and 2D observations")
    common(p)
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--num-cameras", type=_positive_int, default=4)
    p.add_argument("--noise", type=float, help="2D pixel noise std")

    p = sub.add_parser("train", help="train the diffusion prior on a synth dataset")
    common(p)
    p.add_argument("--data", required=True, help="`synth` output directory")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("sample", help="draw guided hypotheses for one observation file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--obs", required=True, help=".obs2d observation file")
    p.add_argument("--root", required=True, help=".mseq file supplying the root trajectory")
    p.add_argument("--camera-dir", required=True, help="directory of <camera_id>.json files")
    p.add_argument("--cameras", help="comma-separated camera ids to use (default: all)")
    p.add_argument("--gt", help="ground-truth .mseq; enables metrics and oracle confidences")
    p.add_argument("--hypotheses", type=int)
    p.add_argument("--steps", type=_positive_int, help="sampler grid size T")
    p.add_argument("--skip", type=int, help="skipped steps S")
    p.add_argument("--stride", type=_positive_int, help="respacing step n")
    p.add_argument("--lambda", dest="lam", type=float, help="energy scale")
    p.add_argument("--k", type=_positive_int, help="guided updates per step")
    p.add_argument("--confidence-mode", choices=("ones", "oracle", "file"), default="ones")

    p = sub.add_parser("eval", help="score a hypothesis directory against ground truth")
    common(p, out_required=False)
    p.add_argument("--hypotheses", required=True, help="directory of h_XXXX.mseq files")
    p.add_argument("--gt", required=True)
    p.add_argument("--no-scale", action="store_true", help="rigid (no scale) Procrustes")

    p = sub.add_parser("ablate", help="steps / hypotheses / confidence ablations")
    common(p)
    p.add_argument("kind", choices=("steps", "hypotheses", "confidence"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instances", type=_positive_int)
    p.add_argument("--values", help="comma-separated step or hypothesis counts")
    p.add_argument("--cameras", help="comma-separated camera ids")

    p = sub.add_parser("toy", help="periodic-GP toy experiment")
    common(p)
    p.add_argument("--seeds", type=_positive_int, default=50)
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate, "toy": cmd_toy}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = load_config(args.config)
        if args.out is None and cfg.get("out") is not None:
            args.out = cfg["out"]
        if args.out is None and args.command != "eval":
            raise UsageError("--out is required")
        if args.out is not None:
            out = Output(args.out)
        effective = COMMANDS[args.command](args, cfg, out or _NullOutput())
        if out is not None:
            out.commit(args.command, effective)
        return 0
    except UsageError as exc:
        if out is not None:
            out.abort()
        parser.error(str(exc))
    except (MotionLiftError, OSError, InvalidValue, KeyError, json.JSONDecodeError) as exc:
        if out is not None:
            out.abort()
        print(f"motionlift {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        if out is not None:
            out.abort()
        raise


class _NullOutput:
    """Stand-in when ``eval`` runs without ``--out``: nothing is written."""

    def path(self, rel: str) -> Path:
        return Path(os.devnull)


if __name__ == "__main__":
    sys.exit(main())
