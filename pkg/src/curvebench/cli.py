"""``curvebench`` command-line driver.

Each subcommand reads an optional ``key = value`` config file, applies
``--set key=value`` and flag overrides, writes its CSVs and binary
artifacts into the output directory and records a manifest there.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AttackConfig, PerturbationRecord, deepfool_batch, fgsm_min_epsilon, fooling_rate,
                      load_perturbations, saliency_batch, save_perturbations, uap_iterative)
from .curvature import (CurvatureConfig, DirectionSet, NoQualifyingSamplesError, load_directions,
                        principal_curvatures, save_directions)
from .data import (CheckpointError, IdxFormatError, load_checkpoint, load_idx, mean_normalize, apply_mean,
                   save_checkpoint, synth_split, write_csv)
from .experiments import (ConfigError, ExperimentConfig, default_d_grid, default_s_grid, parse_config,
                          run_accuracy_vs_d, run_confined_norms, run_norm_fractions, run_resampling_table,
                          run_trace, separability_score, symmetry_score, visualize_direction, write_manifest)
from .models import TrainConfig, TrainingDivergedError, build_model, train
from .subspace import Subspace, load_subspace, save_subspace, select_per_class, svd_basis

log = logging.getLogger("curvebench")

COMMANDS = ("train", "attack", "curvature", "svd-basis", "trace", "acc-vs-d", "norm-fractions",
            "confined", "resample-table", "visualize-direction")
CURVATURE_VARIANTS = ["S_pos", "S_neg", "S_neg_pos", "S_flat"]


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# shared plumbing


class Run:
    """Resolved configuration plus helpers shared by the subcommands."""

    def __init__(self, command: str, cfg: ExperimentConfig, threads: int | None):
        self.command = command
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self._splits = None
        self._model = None

    def path(self, name: str) -> Path:
        return self.out / name

    def csv(self, name: str, header, rows) -> Path:
        p = write_csv(self.path(name), header, rows)
        self.outputs.append(p)
        return p

    def artifact(self, p: Path) -> Path:
        self.outputs.append(Path(p))
        return Path(p)

    def splits(self):
        if self._splits is None:
            c = self.cfg
            if c.dataset == "synth":
                self._splits = synth_split(c.synth_classes, c.synth_train, c.synth_test, c.synth_side,
                                           c.synth_seed, sigma=c.synth_sigma, separation=c.synth_separation)
            else:
                for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
                    if not getattr(c, key):
                        raise ConfigError(f"dataset = idx needs {key}")
                raw_tr = load_idx(c.idx_train_images, c.idx_train_labels)
                raw_te = load_idx(c.idx_test_images, c.idx_test_labels, raw_tr.num_classes)
                if c.idx_limit:
                    raw_tr = raw_tr.subset(np.arange(min(c.idx_limit, len(raw_tr))))
                    raw_te = raw_te.subset(np.arange(min(c.idx_limit, len(raw_te))))
                tr = mean_normalize(raw_tr)
                self._splits = (tr, apply_mean(raw_te, tr))
        return self._splits

    def model(self):
        if self._model is None:
            if not self.cfg.model:
                raise ConfigError("missing model path: pass --model (or set model = ... in the config)")
            path = Path(self.cfg.model)
            if not path.exists():
                raise ConfigError(f"--model: no such file {path}")
            self._model = load_checkpoint(path)
        return self._model

    def attack_cfg(self) -> AttackConfig:
        return AttackConfig(max_iterations=self.cfg.max_iterations, overshoot=self.cfg.overshoot,
                            seed=self.cfg.seed, uap_passes=self.cfg.uap_passes)

    def curvature_cfg(self) -> CurvatureConfig:
        c = self.cfg
        return CurvatureConfig(fd_step=c.fd_step, max_samples=c.max_samples, k_top=c.k_top,
                               k_bottom=c.k_bottom, seed=c.seed, attack=self.attack_cfg(),
                               full_spectrum=c.full_spectrum)

    def classes(self) -> list[int]:
        tr, _ = self.splits()
        return list(self.cfg.classes) if self.cfg.classes else list(range(tr.num_classes))

    def deepfools(self, split: str) -> list[PerturbationRecord]:
        p = self.path(f"perturbations_deepfool_{split}.cbprt")
        if p.exists():
            return load_perturbations(p)
        tr, te = self.splits()
        recs = deepfool_batch(self.model(), (tr if split == "train" else te).images, self.attack_cfg())
        save_perturbations(recs, p)
        self.artifact(p)
        return recs

    def directions(self, c: int) -> DirectionSet:
        p = self.path(f"directions_c{c}.cbdir")
        if p.exists():
            return load_directions(p)
        tr, _ = self.splits()
        ds = principal_curvatures(self.model(), tr, c, self.curvature_cfg())
        save_directions(ds, p)
        self.artifact(p)
        return ds

    def svd_subspaces(self) -> dict[str, Subspace]:
        out = {}
        for ordering in ("S_hi", "S_lo"):
            p = self.path(f"subspace_{ordering}.cbsub")
            if p.exists():
                out[ordering] = load_subspace(p)
            else:
                out[ordering] = svd_basis(self.deepfools("train"), ordering)
                save_subspace(out[ordering], p)
                self.artifact(p)
        return out

    def d_grid(self, full: int) -> list[int]:
        grid = self.cfg.d_grid or default_d_grid(full)
        bad = [d for d in grid if not (isinstance(d, int) and 0 <= d <= full)]
        if bad:
            raise ConfigError(f"d_grid entries must be integers in [0, {full}], got {bad}")
        return [int(d) for d in grid]

    def s_grid(self) -> np.ndarray:
        norms = [r.l2_norm for r in self.deepfools("test") if r.converged]
        if not norms:
            raise NumericalFailure("no converged DeepFool perturbation to scale the s grid")
        return default_s_grid(float(np.median(norms)), self.cfg.s_points, self.cfg.s_span)

    def pick_direction(self, ds: DirectionSet) -> np.ndarray:
        kind, rank = self.cfg.direction, self.cfg.rank
        if rank < 0 or rank >= len(ds):
            raise ConfigError(f"rank must be in [0, {len(ds)}), got {rank}")
        return ds.select(rank + 1, kind)[rank]


# --------------------------------------------------------------------------
# subcommands


def cmd_train(run: Run) -> None:
    c = run.cfg
    tr, te = run.splits()
    model = build_model(c.arch, tr.image_shape, tr.num_classes, seed=c.seed)
    tcfg = TrainConfig(learning_rate=c.learning_rate, momentum=c.momentum, batch_size=c.batch_size,
                       epochs=c.epochs, seed=c.seed, weight_decay=c.weight_decay)
    model, history = train(model, tr, tcfg, test=te)
    path = Path(c.model) if c.model else run.path("model.cbnet")
    save_checkpoint(model, path)
    run.artifact(path)
    run.csv("train_history.csv", ["epoch", "loss", "train_acc", "test_acc"],
            [[h["epoch"], h["loss"], h["train_acc"], h["test_acc"]] for h in history])


def cmd_attack(run: Run) -> None:
    model = run.model()
    tr, te = run.splits()
    acfg = run.attack_cfg()
    df = run.deepfools("test")
    run.deepfools("train")
    fg = fgsm_min_epsilon(model, te.images)
    sal = saliency_batch(model, te.images)
    sal_recs = [PerturbationRecord.make(g, int(y), int(y), 0, "saliency", True)
                for g, y in zip(sal, te.labels)]
    df_norms = [r.l2_norm for r in df if r.converged]
    xi = run.cfg.uap_xi if run.cfg.uap_xi is not None else 2.0 * float(np.median(df_norms))
    v = uap_iterative(model, te, xi, acfg)
    uap_rec = PerturbationRecord.make(v, -1, -1, acfg.uap_passes, "uap", True)
    for name, recs in (("fgsm", fg), ("saliency", sal_recs), ("uap", [uap_rec])):
        p = run.path(f"perturbations_{name}_test.cbprt")
        save_perturbations(recs, p)
        run.artifact(p)
    rows = []
    for name, recs in (("deepfool", df), ("fgsm", fg)):
        ok = [r for r in recs if r.converged]
        rows.append([name, len(recs), len(ok) / len(recs),
                     float(np.mean([r.l2_norm for r in ok])) if ok else float("nan"),
                     float(np.mean([r.iterations for r in recs]))])
    rows.append(["uap", 1, 1.0, float(np.linalg.norm(v)), acfg.uap_passes])
    run.csv("attack_summary.csv", ["method", "count", "converged_rate", "mean_norm", "mean_iterations"], rows)
    run.csv("uap_fooling.csv", ["xi", "fooling_rate"], [[xi, fooling_rate(model, te.images, v)]])


def cmd_curvature(run: Run) -> None:
    rows = []
    for c in run.classes():
        ds = run.directions(c)
        res = ds.meta.get("residuals", [np.nan] * len(ds))
        for k in range(len(ds)):
            rows.append([c, k, ds.scores[k], float(res[k]), ds.meta.get("accepted", -1)])
    run.csv("curvature_scores.csv", ["class", "rank", "score", "residual", "accepted"], rows)


def cmd_svd_basis(run: Run) -> None:
    subs = run.svd_subspaces()
    hi = subs["S_hi"]
    run.csv("singular_values.csv", ["index", "singular_value"],
            [[k, float(sv)] for k, sv in enumerate(hi.scores)])


def cmd_trace(run: Run) -> None:
    model = run.model()
    _, te = run.splits()
    c = run.cfg.target_class
    direction = run.pick_direction(run.directions(c))
    s = run.s_grid()
    tag = f"c{c}_{run.cfg.direction}{run.cfg.rank}_{run.cfg.population}"
    res = run_trace(model, te, direction, c, s, run.cfg.population, tag)
    run.csv(f"trace_{tag}.csv", list(res.HEADER), res.rows())
    s0, asym = symmetry_score(res.curves, s)
    sep = separability_score(res.curves, s) if res.count >= 2 else float("nan")
    run.csv(f"trace_{tag}_summary.csv",
            ["class", "direction", "rank", "population", "count", "swing", "median_s0",
             "median_asymmetry", "separability"],
            [[c, run.cfg.direction, run.cfg.rank, run.cfg.population, res.count, res.swing,
              float(np.median(s0)), float(np.median(asym)), sep]])


def _curvature_bases(run: Run):
    """Per-variant direction sets and the largest usable d for each variant."""
    sets = [run.directions(c) for c in run.classes()]
    variants = run.cfg.variants or CURVATURE_VARIANTS
    per_class = min(len(s) for s in sets)
    tops = {v: per_class // 2 if v == "S_neg_pos" else per_class for v in variants}
    return {v: sets for v in variants}, tops


def cmd_acc_vs_d(run: Run) -> None:
    model = run.model()
    tr, te = run.splits()
    splits = {"train": tr, "test": te}
    if run.cfg.source == "svd":
        svd = run.svd_subspaces()
        bases = {v: svd[v] for v in run.cfg.variants or ["S_hi", "S_lo"]}
        tops = {v: tr.input_dim for v in bases}
    else:
        bases, tops = _curvature_bases(run)
    header, rows = [], []
    for v in bases:
        header, part = run_accuracy_vs_d(model, splits, {v: bases[v]}, run.d_grid(tops[v]), run.cfg.source)
        rows.extend(part)
    run.csv(f"acc_vs_d_{run.cfg.source}.csv", header, rows)


def _test_perturbations(run: Run) -> dict[str, np.ndarray]:
    out = {"deepfool": np.array([r.delta for r in run.deepfools("test") if r.converged])}
    for name in ("fgsm", "saliency", "uap"):
        p = run.path(f"perturbations_{name}_test.cbprt")
        if p.exists():
            out[name] = np.array([r.delta for r in load_perturbations(p)])
    return out


def cmd_norm_fractions(run: Run) -> None:
    tr, _ = run.splits()
    subs = {}
    if run.cfg.source == "svd":
        svd = run.svd_subspaces()
        for v in run.cfg.variants or ["S_hi", "S_lo"]:
            for d in run.d_grid(tr.input_dim):
                subs[(v, d)] = svd[v].prefix(d)
    else:
        bases, tops = _curvature_bases(run)
        for v, sets in bases.items():
            for d in run.d_grid(tops[v]):
                subs[(v, d)] = select_per_class(sets, v, d)
    header, rows = run_norm_fractions(subs, _test_perturbations(run), run.cfg.random_baseline, run.cfg.seed)
    run.csv(f"norm_fractions_{run.cfg.source}.csv", header, rows)


def cmd_confined(run: Run) -> None:
    model = run.model()
    tr, te = run.splits()
    svd = run.svd_subspaces()
    subs = {}
    for v in run.cfg.variants or ["S_hi", "S_lo"]:
        for d in run.d_grid(tr.input_dim):
            if d == 0:
                continue
            subs[(v, d)] = svd[v].prefix(d)
    header, rows = run_confined_norms(model, te.images, subs, run.attack_cfg())
    run.csv("confined_norms.csv", header, rows)


def cmd_resample_table(run: Run) -> None:
    model = run.model()
    _, te = run.splits()
    side = te.image_shape[-1]
    d_low = run.cfg.d_low or sorted({side, max(1, (3 * side) // 4), max(1, side // 2),
                                     max(1, side // 4)}, reverse=True)
    if any(not (isinstance(d, int) and 1 <= d <= side) for d in d_low):
        raise ConfigError(f"d_low entries must be integers in [1, {side}], got {d_low}")
    header, rows = run_resampling_table(model, te, d_low, run.cfg.f_grid, run.attack_cfg(),
                                        perturbations=run.deepfools("test"))
    run.csv("resample_table.csv", header, rows)


def cmd_visualize_direction(run: Run) -> None:
    c = run.cfg.target_class
    direction = run.pick_direction(run.directions(c))
    p = visualize_direction(direction, run.path(
        f"direction_c{c}_{run.cfg.direction}{run.cfg.rank}.{'pgm' if direction.shape[0] == 1 else 'ppm'}"))
    run.artifact(p)


HANDLERS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "curvature": cmd_curvature,
    "svd-basis": cmd_svd_basis,
    "trace": cmd_trace,
    "acc-vs-d": cmd_acc_vs_d,
    "norm-fractions": cmd_norm_fractions,
    "confined": cmd_confined,
    "resample-table": cmd_resample_table,
    "visualize-direction": cmd_visualize_direction,
}


# --------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvebench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"curvebench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--model", help="model checkpoint (CBNET1)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--class", dest="target_class", type=int, help="target class")
        p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = reproducible)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"--config: no such file {path}")
        values.update(parse_config(path.read_text(encoding="utf-8")))
    if args.set:
        over = parse_config("\n".join(args.set))
        values.update(over)
    for key in ("out", "model", "seed", "target_class"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    try:
        return ExperimentConfig.from_mapping(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(args.command, cfg, args.threads)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](run)
        write_manifest(run.out, args.command, cfg.as_dict(), run.outputs, args.threads)
    except (ConfigError, CheckpointError, IdxFormatError) as exc:
        print(f"curvebench {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, NoQualifyingSamplesError, TrainingDivergedError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"curvebench {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"curvebench {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
