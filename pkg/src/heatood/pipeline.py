"""Pipeline stages behind the command line.

Every stage reads its inputs from the run directory, checks each consumed
artifact against the digest recorded by the stage that produced it, writes
its outputs and records their digests and wall time in ``manifest.txt``.
Re-running a stage drops the manifest records of every stage downstream of
it, so stale artifacts cannot be consumed silently.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import FeatureBank, FrozenClassifier, accuracy, extract_feature_bank, train_classifier
from .config import ExperimentConfig
from .data import (
    Dataset,
    augment_brightness,
    augment_contrast,
    export_heatmap_image,
    load_dataset,
    save_dataset,
    synth_dataset,
    write_ppm,
)
from .decoder import DecoderModel, decoder_forward, decoder_inputs, train_decoder
from .errors import ConfigurationError, HeatoodError, InputError
from .metrics import EvalReport, auroc, evaluate, format_kv, format_table
from .scoring import METHODS, ScoreRecord, energy_scores, heatmap_scores, msp_scores, read_scores, write_scores
from .targets import TargetSet, build_target_sets

log = logging.getLogger("heatood")

CLASSIFIER = "classifier.ckpt"
BANK = "bank.fb"
TARGETS = "targets.ts"
DECODER = "decoder.ckpt"
SCORES = "scores.txt"
REPORT = "report.txt"
REPORT_KV = "report.kv"
MANIFEST = "manifest.txt"
LIGHTING = "lighting.txt"
ABLATION = "ablation.txt"

STAGES = ("data", "train-classifier", "build-targets", "train-decoder", "score", "eval", "visualize",
          "lighting", "ablate-oodsize")
DEPENDS = {
    "data": (),
    "train-classifier": ("data",),
    "build-targets": ("train-classifier",),
    "train-decoder": ("build-targets",),
    "score": ("train-decoder",),
    "eval": ("score",),
    "visualize": ("train-decoder",),
    "lighting": ("train-decoder",),
    "ablate-oodsize": ("train-decoder",),
}
PIPELINE = ("train-classifier", "build-targets", "train-decoder", "score", "eval", "visualize", "lighting")


class StageInputMissing(HeatoodError):
    def __init__(self, stage: str, paths):
        self.stage = stage
        self.paths = [str(p) for p in paths]
        super().__init__(f"stage {stage!r}: missing input {', '.join(self.paths)}")


class DigestMismatch(HeatoodError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ----------------------------------------------------------------------
# manifest


@dataclass
class StageRecord:
    wall_time_s: float = 0.0
    artifacts: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    def producer(self, rel: str) -> str | None:
        for name, rec in self.stages.items():
            if rel in rec.artifacts:
                return name
        return None

    def drop_downstream(self, stage: str) -> None:
        doomed = {stage}
        changed = True
        while changed:
            changed = False
            for name, deps in DEPENDS.items():
                if name not in doomed and any(d in doomed for d in deps):
                    doomed.add(name)
                    changed = True
        for name in doomed:
            self.stages.pop(name, None)
        if "eval" in doomed:
            self.reports.clear()

    def render(self) -> str:
        lines = ["# heatood run manifest"]
        lines += [f"config\t{k}\t{v}" for k, v in self.config]
        for name in STAGES:
            rec = self.stages.get(name)
            if rec is None:
                continue
            lines.append(f"stage\t{name}\twall_time_s\t{rec.wall_time_s:.3f}")
            lines += [f"artifact\t{name}\t{rel}\t{dig}" for rel, dig in sorted(rec.artifacts.items())]
            lines += [f"note\t{name}\t{k}\t{v}" for k, v in sorted(rec.notes.items())]
        for method in METHODS:
            rep = self.reports.get(method)
            if rep is not None:
                lines += [f"report\t{method}\t{k}\t{v!r}" for k, v in rep.as_dict().items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(self.render(), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        m = cls()
        report_vals: dict[str, dict] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            kind = parts[0]
            try:
                if kind == "config":
                    m.config.append((parts[1], parts[2]))
                elif kind == "stage":
                    m.stages.setdefault(parts[1], StageRecord()).wall_time_s = float(parts[3])
                elif kind == "artifact":
                    m.stages.setdefault(parts[1], StageRecord()).artifacts[parts[2]] = parts[3]
                elif kind == "note":
                    m.stages.setdefault(parts[1], StageRecord()).notes[parts[2]] = parts[3]
                elif kind == "report":
                    report_vals.setdefault(parts[1], {})[parts[2]] = float(parts[3])
                else:
                    raise ValueError(kind)
            except (IndexError, ValueError):
                raise InputError(f"{path}:{lineno}: malformed manifest line") from None
        for method, vals in report_vals.items():
            m.reports[method] = EvalReport(method, vals["auroc"], vals["aupr_s"], vals["aupr_e"], vals["fpr95"],
                                           int(vals["n_in"]), int(vals["n_out"]))
        return m


# ----------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = self.root / MANIFEST
        self.manifest = RunManifest.load(mpath) if mpath.exists() else RunManifest()
        self._check_external_paths()

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _check_external_paths(self) -> None:
        if self.cfg.data.source != "files":
            return
        missing = [p for p in self.cfg.data.paths.values() if not Path(p).exists()]
        if missing:
            raise StageInputMissing("data", missing)

    def require(self, stage: str, *rels: str) -> None:
        """Presence and digest check for artifacts produced by earlier stages."""
        missing = [self.path(r) for r in rels if not self.path(r).exists()]
        if missing:
            raise StageInputMissing(stage, missing)
        for rel in rels:
            self.verify(stage, rel)

    def verify(self, stage: str, rel: str) -> None:
        producer = self.manifest.producer(rel)
        if producer is None:
            raise DigestMismatch(f"stage {stage!r}: {self.path(rel)} is not recorded in the manifest "
                                 "(stale or foreign artifact); re-run the stage that produces it")
        want = self.manifest.stages[producer].artifacts[rel]
        got = sha256_file(self.path(rel))
        if got != want:
            raise DigestMismatch(f"stage {stage!r}: digest mismatch for {self.path(rel)} "
                                 f"(manifest {want[:12]}..., file {got[:12]}...); the artifact was modified")

    def record(self, stage: str, rels, wall: float, notes: dict | None = None, reports=None) -> None:
        if stage != "data":
            self.manifest.drop_downstream(stage)
        rec = self.manifest.stages.setdefault(stage, StageRecord())
        rec.wall_time_s = rec.wall_time_s + wall if stage == "data" else wall
        for rel in rels:
            rec.artifacts[rel] = sha256_file(self.path(rel))
        rec.notes.update({k: repr(v) if isinstance(v, float) else str(v) for k, v in (notes or {}).items()})
        if reports is not None:
            self.manifest.reports = {r.method: r for r in reports}
        self.manifest.config = self.cfg.snapshot()
        self.manifest.save(self.path(MANIFEST))

    # datasets --------------------------------------------------------

    def dataset(self, stage: str, split: str) -> Dataset:
        cfg = self.cfg
        if cfg.data.source == "files":
            path = cfg.data.paths.get(split)
            if path is None:
                if split == "out_pool":
                    path = cfg.data.paths["out_train"]
                else:
                    raise ConfigurationError(f"no path configured for data.{split}")
            return load_dataset(path, cfg.data.format, cfg.classifier.num_classes, name=split)
        rel = f"data/{split}.hds"
        p = self.path(rel)
        if p.exists() and self.manifest.producer(rel) == "data":
            self.verify(stage, rel)
            return load_dataset(p, "hood_native", cfg.classifier.num_classes, name=split)
        t0 = time.perf_counter()
        if split == "out_pool":
            count = cfg.synth.counts.get("out_pool", max(cfg.ablate_sizes))
            ds = synth_dataset(cfg.synth, cfg.seed, "out_train", count=count)
        else:
            ds = synth_dataset(cfg.synth, cfg.seed, split)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(p, ds)
        self.record("data", [rel], time.perf_counter() - t0)
        log.info("materialised %s (%d images) at %s", split, len(ds), p)
        return Dataset(ds.images, ds.labels, split)

    # models ----------------------------------------------------------

    def classifier(self, stage: str) -> FrozenClassifier:
        self.require(stage, CLASSIFIER)
        return FrozenClassifier.load(self.path(CLASSIFIER), self.cfg.classifier)

    def bank(self, stage: str) -> FeatureBank:
        self.require(stage, BANK)
        return FeatureBank.load(self.path(BANK))

    def decoder(self, stage: str, bank: FeatureBank) -> DecoderModel:
        self.require(stage, DECODER)
        input_dim = bank.dim + self.cfg.classifier.num_classes
        side = self.cfg.classifier.height
        return DecoderModel.load(self.path(DECODER), self.cfg.decoder, input_dim, (side, side, 3))


# ----------------------------------------------------------------------
# stages


STAGE_FUNCS: dict = {}


def stage(name: str):
    """Register a stage body returning ``(artifacts, notes[, reports])``; the
    wrapper times it and records the outcome in the manifest."""

    def deco(fn):
        def wrapper(run: Run):
            t0 = time.perf_counter()
            rels, notes, *rest = fn(run)
            wall = time.perf_counter() - t0
            run.record(name, rels, wall, notes, reports=rest[0] if rest else None)
            log.info("stage %s done in %.1fs", name, wall)

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        STAGE_FUNCS[name] = wrapper
        return wrapper

    return deco


def _check_inputs(run: Run, stage_name: str, *rels: str) -> None:
    """Report every missing input at once before any work starts."""
    missing = [run.path(r) for r in rels if not run.path(r).exists()]
    if missing:
        raise StageInputMissing(stage_name, missing)


@stage("train-classifier")
def stage_train_classifier(run: Run):
    """Train and freeze the classifier on the in-distribution training split."""
    d_in = run.dataset("train-classifier", "in_train")
    model = train_classifier(d_in, run.cfg.classifier, log=log.info)
    model.save(run.path(CLASSIFIER))
    acc = accuracy(model, d_in)
    log.info("classifier train accuracy %.4f", acc)
    return [CLASSIFIER], {"train_accuracy": acc, "weights_sha256": model.digest()}


@stage("build-targets")
def stage_build_targets(run: Run):
    """Feature bank over the in-distribution training split plus decoder targets."""
    _check_inputs(run, "build-targets", CLASSIFIER)
    model = run.classifier("build-targets")
    d_in = run.dataset("build-targets", "in_train")
    d_out = run.dataset("build-targets", "out_train")
    bank = extract_feature_bank(model, d_in)
    bank.save(run.path(BANK))
    targets = build_target_sets(model, bank, d_in, d_out)
    targets.save(run.path(TARGETS))
    mean_abs = float(np.abs(targets.out_heatmaps).mean())
    return [BANK, TARGETS], {"n_in": len(targets.in_refs), "n_out": len(targets.out_refs),
                             "ood_target_mean_abs": mean_abs}


@stage("train-decoder")
def stage_train_decoder(run: Run):
    """Fit the heatmap decoder on the stored targets."""
    _check_inputs(run, "train-decoder", CLASSIFIER, BANK, TARGETS)
    model = run.classifier("train-decoder")
    bank = run.bank("train-decoder")
    run.require("train-decoder", TARGETS)
    targets = TargetSet.load(run.path(TARGETS))
    d_in = run.dataset("train-decoder", "in_train")
    d_out = run.dataset("train-decoder", "out_train")
    if len(targets.in_refs) != len(d_in) or len(targets.out_refs) != len(d_out):
        raise InputError("targets.ts does not match the configured datasets; re-run build-targets")
    before = model.digest()
    dec = train_decoder(targets, model, bank, d_in, d_out, run.cfg.decoder, log=log.info)
    if model.digest() != before:
        raise HeatoodError("classifier weights changed during decoder training")
    dec.save(run.path(DECODER))
    losses = dec.epoch_losses
    return [DECODER], {"first_epoch_loss": losses[0], "final_epoch_loss": losses[-1], "epochs": len(losses)}


def _test_scores(run: Run, model, bank, dec, images: np.ndarray) -> dict[str, np.ndarray]:
    x, logits, probs = decoder_inputs(model, bank, images)
    return {
        "heatmap": heatmap_scores(decoder_forward(dec, x)),
        "msp": msp_scores(probs),
        "energy": energy_scores(logits, run.cfg.energy_temperature),
    }


@stage("score")
def stage_score(run: Run):
    """Heatmap, MSP and energy scores for every test image."""
    _check_inputs(run, "score", CLASSIFIER, BANK, DECODER)
    model = run.classifier("score")
    bank = run.bank("score")
    dec = run.decoder("score", bank)
    records = []
    for split, membership in (("in_test", "in"), ("out_test", "out")):
        ds = run.dataset("score", split)
        scores = _test_scores(run, model, bank, dec, ds.images)
        for method in METHODS:
            records += [ScoreRecord(f"{split}/{i}", method, membership, float(s)) for i, s in enumerate(scores[method])]
    records.sort(key=lambda r: METHODS.index(r.method))
    write_scores(run.path(SCORES), records)
    return [SCORES], {"records": len(records)}


def reports_from_scores(records, tpr_target: float = 0.95) -> list[EvalReport]:
    out = []
    for method in METHODS:
        s_in = [r.score for r in records if r.method == method and r.membership == "in"]
        s_out = [r.score for r in records if r.method == method and r.membership == "out"]
        if s_in and s_out:
            out.append(evaluate(s_in, s_out, method, tpr_target))
    if not out:
        raise InputError("score file holds no method with both in- and out-of-distribution records")
    return out


@stage("eval")
def stage_eval(run: Run):
    """Threshold-free metrics from scores.txt; prints the comparison table."""
    _check_inputs(run, "eval", SCORES)
    run.require("eval", SCORES)
    reports = reports_from_scores(read_scores(run.path(SCORES)), run.cfg.tpr_target)
    table = format_table(reports)
    run.path(REPORT).write_text(table, encoding="utf-8")
    run.path(REPORT_KV).write_text(format_kv(reports), encoding="utf-8")
    print(table, end="")
    return [REPORT, REPORT_KV], {}, reports


@stage("visualize")
def stage_visualize(run: Run):
    """PPM exports: decoder heatmaps for test images and training targets with their inputs."""
    _check_inputs(run, "visualize", CLASSIFIER, BANK, DECODER, TARGETS)
    model = run.classifier("visualize")
    bank = run.bank("visualize")
    dec = run.decoder("visualize", bank)
    run.require("visualize", TARGETS)
    targets = TargetSet.load(run.path(TARGETS))
    k = run.cfg.visualize_count
    outdir = run.path("heatmaps")
    outdir.mkdir(exist_ok=True)
    rels = []
    for split in ("in_test", "out_test"):
        ds = run.dataset("visualize", split)
        x, _, _ = decoder_inputs(model, bank, ds.images[:k])
        maps = decoder_forward(dec, x)
        for i, hm in enumerate(maps):
            export_heatmap_image(hm, outdir / f"{split}_{i:03d}.ppm")
            write_ppm(outdir / f"{split}_{i:03d}_input.ppm", ds.images[i])
            rels += [f"heatmaps/{split}_{i:03d}.ppm", f"heatmaps/{split}_{i:03d}_input.ppm"]
    d_in = run.dataset("visualize", "in_train")
    d_out = run.dataset("visualize", "out_train")
    for j, (ref, hm, nn) in enumerate(targets.h_out[:k]):
        export_heatmap_image(hm, outdir / f"target_{j:03d}.ppm")
        write_ppm(outdir / f"target_{j:03d}_input.ppm", d_out.images[ref])
        write_ppm(outdir / f"target_{j:03d}_neighbour.ppm", d_in.images[nn])
        rels += [f"heatmaps/target_{j:03d}{s}.ppm" for s in ("", "_input", "_neighbour")]
    return rels, {"images": len(rels)}


def lighting_means(run: Run, model, bank, dec, stage_name: str = "lighting") -> list[tuple[str, float, float]]:
    """(transform, factor, mean heatmap score) rows, identity factors first."""
    d_test = run.dataset(stage_name, "in_test")
    rows = []
    for kind, factors, fn in (("brightness", run.cfg.lighting_brightness, augment_brightness),
                              ("contrast", run.cfg.lighting_contrast, augment_contrast)):
        for f in (1.0,) + tuple(x for x in factors if x != 1.0):
            ds = d_test.map_images(lambda im: fn(im, f))
            x, _, _ = decoder_inputs(model, bank, ds.images)
            rows.append((kind, f, float(heatmap_scores(decoder_forward(dec, x)).mean())))
    return rows


@stage("lighting")
def stage_lighting(run: Run):
    """Mean heatmap score on brightened / contrast-reduced in-distribution test images."""
    _check_inputs(run, "lighting", CLASSIFIER, BANK, DECODER)
    model = run.classifier("lighting")
    bank = run.bank("lighting")
    dec = run.decoder("lighting", bank)
    rows = lighting_means(run, model, bank, dec)
    d_out = run.dataset("lighting", "out_test")
    x, _, _ = decoder_inputs(model, bank, d_out.images)
    out_mean = float(heatmap_scores(decoder_forward(dec, x)).mean())
    lines = ["# transform\tfactor\tmean_heatmap_score"]
    lines += [f"{kind}\t{f!r}\t{m!r}" for kind, f, m in rows]
    lines.append(f"out_test\t-\t{out_mean!r}")
    run.path(LIGHTING).write_text("\n".join(lines) + "\n", encoding="utf-8")
    rels = [LIGHTING]
    d_test = run.dataset("lighting", "in_test")
    outdir = run.path("heatmaps")
    outdir.mkdir(exist_ok=True)
    n_show = min(4, len(d_test), run.cfg.visualize_count)
    for kind, f, _ in rows:
        fn = augment_brightness if kind == "brightness" else augment_contrast
        imgs = np.stack([fn(im, f) for im in d_test.images[:n_show]])
        maps = decoder_forward(dec, decoder_inputs(model, bank, imgs)[0])
        tag = f"{kind[0].upper()}{f:g}"
        for i in range(n_show):
            export_heatmap_image(maps[i], outdir / f"lighting_{tag}_{i:03d}.ppm")
            write_ppm(outdir / f"lighting_{tag}_{i:03d}_input.ppm", imgs[i])
            rels += [f"heatmaps/lighting_{tag}_{i:03d}.ppm", f"heatmaps/lighting_{tag}_{i:03d}_input.ppm"]
    for kind, f, m in rows:
        log.info("lighting %s %g: mean score %.5f", kind, f, m)
    log.info("lighting out_test mean score %.5f", out_mean)
    notes = {f"{kind}.{f:g}": m for kind, f, m in rows}
    notes["out_test"] = out_mean
    return rels, notes


def heatmap_auroc(run: Run, stage_name: str, model, bank, dec) -> float:
    s = []
    for split in ("in_test", "out_test"):
        ds = run.dataset(stage_name, split)
        x, _, _ = decoder_inputs(model, bank, ds.images)
        s.append(heatmap_scores(decoder_forward(dec, x)))
    return auroc(s[0], s[1])


@stage("ablate-oodsize")
def stage_ablate(run: Run):
    """Heatmap AUROC as a function of the OOD training set size."""
    _check_inputs(run, "ablate-oodsize", CLASSIFIER, BANK, DECODER)
    model = run.classifier("ablate-oodsize")
    bank = run.bank("ablate-oodsize")
    dec = run.decoder("ablate-oodsize", bank)
    reference = heatmap_auroc(run, "ablate-oodsize", model, bank, dec)
    d_in = run.dataset("ablate-oodsize", "in_train")
    main_size = len(run.dataset("ablate-oodsize", "out_train"))
    pool = run.dataset("ablate-oodsize", "out_pool")
    sizes = tuple(run.cfg.ablate_sizes)
    if max(sizes) > len(pool):
        raise ConfigurationError(f"ablation size {max(sizes)} exceeds the OOD pool of {len(pool)} images")
    pool_targets = build_target_sets(model, bank, d_in, pool)
    lines = ["# size\tauroc\tdelta_vs_reference", f"reference:{main_size}\t{reference!r}\t0.0"]
    notes = {"reference_size": main_size, "reference_auroc": reference}
    for size in sizes:
        t0 = time.perf_counter()
        dec_k = train_decoder(pool_targets.restrict_out(size), model, bank, d_in, pool, run.cfg.decoder)
        a = heatmap_auroc(run, "ablate-oodsize", model, bank, dec_k)
        lines.append(f"{size}\t{a!r}\t{a - reference!r}")
        notes[f"auroc.{size}"] = a
        log.info("ablation size %d: AUROC %.5f (reference %.5f) in %.1fs", size, a, reference,
                 time.perf_counter() - t0)
    run.path(ABLATION).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [ABLATION], notes


def run_stage(cfg: ExperimentConfig, name: str) -> Run:
    if name not in STAGE_FUNCS:
        raise ConfigurationError(f"unknown stage {name!r}")
    try:
        run = Run(cfg)
        STAGE_FUNCS[name](run)
    except (HeatoodError, OSError) as exc:
        # so the caller can name the failing stage when running several
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise
    return run


def run_pipeline(cfg: ExperimentConfig, stages=PIPELINE) -> Run:
    run = None
    for name in stages:
        log.info("== %s", name)
        run = run_stage(cfg, name)
    return run


def read_lighting(path) -> list[tuple[str, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        kind, f, m = line.split("\t")
        rows.append((kind, float("nan") if f == "-" else float(f), float(m)))
    return rows


def read_ablation(path) -> tuple[float, dict[int, float]]:
    ref, curve = None, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        key, a, _ = line.split("\t")
        if key.startswith("reference"):
            ref = float(a)
        else:
            curve[int(key)] = float(a)
    return ref, curve
