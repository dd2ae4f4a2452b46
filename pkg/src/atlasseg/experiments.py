"""Study harness: cohort builds, variant sweeps, tables, and figures.

A study spec names one of six study kinds, a phantom cohort, seeds, and
optional training overrides. The runner materializes the cohort on disk
once (shared by every variant), trains each variant x seed combination,
evaluates all of them on the same held-out test phantoms (one per atlas
week), and writes per-run metric CSVs plus aggregate report tables and
SVG figures.

Study kinds and their variant rows:

  baseline_vs_atlasseg: unet, msa
  subgroups:            unet, msa (report focuses on the GA subgroup bars)
  robustness:           unet, msa (plus perturbation sweeps per run)
  ablate_fusion:        unet, unet+msa, concat, sa, msa
  ablate_position:      early, late, encoder, decoder, full
  ablate_channels:      4, 8, 16, 32 (template branch width; subject
                        branch width fixed at 32)
"""

from __future__ import annotations

import csv
import json
import math
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import (
    SUBGROUP_NAMES,
    _fmt,
    evaluate_subject,
    reports_to_csv,
    subgroup_summary,
    subgroup_summary_to_csv,
)
from .network import ArchitectureConfig, fusion_position_ids, load_checkpoint
from .perturb import run_robustness_suite
from .phantom import (
    ATLAS_WEEK_MAX,
    ATLAS_WEEK_MIN,
    PhantomSpec,
    atlas_for_week,
    generate_cohort,
    generate_phantom,
)
from .pipeline import (
    AtlasLibrary,
    load_manifest,
    load_sample,
    sliding_window_infer,
    write_atlas_dir,
    write_manifest,
)
from .trainer import TrainConfig, apply_determinism, make_predictor, train
from .volume import TISSUE_NAMES, write_mvol

STUDY_KINDS = (
    "baseline_vs_atlasseg",
    "ablate_fusion",
    "ablate_position",
    "ablate_channels",
    "robustness",
    "subgroups",
)

FUSION_VARIANTS = ("unet", "unet+msa", "concat", "sa", "msa")
POSITION_VARIANTS = ("early", "late", "encoder", "decoder", "full")
CHANNEL_VARIANTS = ("4", "8", "16", "32")

_ENC = tuple(f"E{k}" for k in range(1, 5))
_DEC = tuple(f"D{k}" for k in range(4, 0, -1))
POSITION_SETS = {
    "early": ("E1",),
    "late": ("D1",),
    "encoder": _ENC,
    "decoder": _DEC,
    "full": fusion_position_ids(4),
}

# reference row for paired comparisons, per study kind
REFERENCE_VARIANT = {
    "baseline_vs_atlasseg": "msa",
    "subgroups": "msa",
    "robustness": "msa",
    "ablate_fusion": "msa",
    "ablate_position": "full",
    "ablate_channels": "8",
}


def study_variants(study: str) -> tuple:
    if study in ("baseline_vs_atlasseg", "subgroups", "robustness"):
        return ("unet", "msa")
    if study == "ablate_fusion":
        return FUSION_VARIANTS
    if study == "ablate_position":
        return POSITION_VARIANTS
    if study == "ablate_channels":
        return CHANNEL_VARIANTS
    raise ValueError(f"unknown study {study!r}")


def imbalanced_week_weights() -> dict:
    """Triangular week histogram peaking mid-gestation; extremes are scarce."""
    return {w: max(0.5, 8.0 - abs(w - 30.5)) for w in range(ATLAS_WEEK_MIN, ATLAS_WEEK_MAX + 1)}


@dataclass
class CohortSpec:
    n: int = 50
    week_weights: dict = field(default_factory=imbalanced_week_weights)
    seed: int = 0
    size: int = 64
    variability: float = 0.3
    noise_sd: float = 0.02

    def __post_init__(self):
        self.week_weights = {int(k): float(v) for k, v in self.week_weights.items()}


@dataclass
class StudySpec:
    study: str
    cohort: CohortSpec = field(default_factory=CohortSpec)
    seeds: tuple = (0, 1, 2)
    train_overrides: dict = field(default_factory=dict)
    variants: tuple | None = None  # None means the study's full row set

    def __post_init__(self):
        if self.study not in STUDY_KINDS:
            raise ValueError(f"study must be one of {STUDY_KINDS}, got {self.study!r}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed required")
        allowed = study_variants(self.study)
        if self.variants is None:
            self.variants = allowed
        else:
            self.variants = tuple(str(v) for v in self.variants)
            bad = [v for v in self.variants if v not in allowed]
            if bad:
                raise ValueError(f"variants {bad} not valid for study {self.study}")

    def to_json(self, path) -> None:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        doc["variants"] = list(self.variants)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "StudySpec":
        with open(path) as fh:
            doc = json.load(fh)
        if "cohort" in doc and isinstance(doc["cohort"], dict):
            doc["cohort"] = CohortSpec(**doc["cohort"])
        if doc.get("variants") is not None:
            doc["variants"] = tuple(doc["variants"])
        if "seeds" in doc:
            doc["seeds"] = tuple(doc["seeds"])
        return cls(**doc)


def variant_architecture(study: str, variant: str, base: ArchitectureConfig) -> ArchitectureConfig:
    """The architecture a variant row trains, derived from the study's base."""
    kw = dict(
        base_channels_seg=base.base_channels_seg,
        base_channels_atlas=base.base_channels_atlas,
        num_stages=base.num_stages,
        out_classes=base.out_classes,
        fusion_positions=fusion_position_ids(base.num_stages),
        fusion_kind="msa",
        atlas_branch=True,
    )
    if study == "ablate_position":
        kw["fusion_positions"] = POSITION_SETS[variant]
    elif study == "ablate_channels":
        kw["base_channels_seg"] = 32
        kw["base_channels_atlas"] = int(variant)
    elif variant == "unet":
        kw["fusion_kind"] = "none"
        kw["atlas_branch"] = False
    elif variant == "unet+msa":
        kw["atlas_branch"] = False
    elif variant == "concat":
        kw["fusion_kind"] = "concat"
    elif variant == "sa":
        kw["fusion_kind"] = "sa"
    elif variant != "msa":
        raise ValueError(f"unknown variant {variant!r} for study {study}")
    return ArchitectureConfig(**kw)


def variant_train_config(spec: StudySpec, variant: str, seed: int) -> TrainConfig:
    base = TrainConfig.desk().to_dict()
    for key, val in spec.train_overrides.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            base[key].update(val)
        else:
            base[key] = val
    cfg = TrainConfig.from_dict(base)
    arch = variant_architecture(spec.study, variant, cfg.arch)
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "arch": asdict(arch), "seed": int(seed)})
    return cfg


# --- cohort materialization --------------------------------------------------


def build_cohort_files(cohort: CohortSpec, cohort_dir) -> tuple[Path, Path, Path]:
    """Write subjects, per-week test phantoms, and the atlas directory.

    Returns (train manifest, test manifest, atlas dir). Test subjects sit
    exactly on integer weeks so every subgroup is covered; their seeds are
    disjoint from the training cohort's by construction.
    """
    cohort_dir = Path(cohort_dir)
    subj_dir = cohort_dir / "subjects"
    test_dir = cohort_dir / "test"
    atlas_dir = cohort_dir / "atlas"
    subj_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)

    specs = generate_cohort(
        cohort.n,
        cohort.week_weights,
        cohort.seed,
        size=cohort.size,
        variability=cohort.variability,
        noise_sd=cohort.noise_sd,
    )
    entries = []
    for i, pspec in enumerate(specs):
        img, lab = generate_phantom(pspec)
        ip = subj_dir / f"s{i:03d}_image.mvol"
        lp = subj_dir / f"s{i:03d}_labels.mvol"
        write_mvol(ip, img)
        write_mvol(lp, lab)
        entries.append(
            {
                "subject_id": f"s{i:03d}",
                "image_path": str(ip.relative_to(cohort_dir)),
                "labels_path": str(lp.relative_to(cohort_dir)),
                "ga": pspec.ga,
            }
        )
    manifest = cohort_dir / "manifest.json"
    write_manifest(manifest, entries)

    test_rng = np.random.default_rng(np.random.SeedSequence([cohort.seed, 0x7E57]))
    test_entries = []
    for week in range(ATLAS_WEEK_MIN, ATLAS_WEEK_MAX + 1):
        pspec = PhantomSpec(
            ga=float(week),
            seed=int(test_rng.integers(0, 2**63 - 1)),
            size=cohort.size,
            variability=cohort.variability,
            noise_sd=cohort.noise_sd,
        )
        img, lab = generate_phantom(pspec)
        ip = test_dir / f"t_w{week}_image.mvol"
        lp = test_dir / f"t_w{week}_labels.mvol"
        write_mvol(ip, img)
        write_mvol(lp, lab)
        test_entries.append(
            {
                "subject_id": f"t_w{week}",
                "image_path": str(ip.relative_to(cohort_dir)),
                "labels_path": str(lp.relative_to(cohort_dir)),
                "ga": float(week),
            }
        )
    test_manifest = cohort_dir / "test_manifest.json"
    write_manifest(test_manifest, test_entries)

    write_atlas_dir(atlas_dir, [atlas_for_week(w, size=cohort.size) for w in range(ATLAS_WEEK_MIN, ATLAS_WEEK_MAX + 1)])
    return manifest, test_manifest, atlas_dir


# --- evaluation --------------------------------------------------------------


def evaluate_run(checkpoint_path, test_manifest, atlas_dir, result_dir,
                 patch_edge: int, stride: int, infer_batch: int = 4,
                 robustness: bool = False):
    """Sliding-window evaluation of one trained run on the test set."""
    result_dir = Path(result_dir)
    result_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(checkpoint_path)
    model.eval()
    predict = make_predictor(model)
    atlases = AtlasLibrary(atlas_dir)
    base = Path(test_manifest).parent
    samples = [load_sample(e, atlases, base_dir=base) for e in load_manifest(test_manifest)]
    reports = []
    for s in samples:
        pred = sliding_window_infer(
            predict, s.image, s.atlas, patch_edge, stride, batch_size=infer_batch
        )
        reports.append(evaluate_subject(pred, s.labels, s.ga, subject_id=s.subject_id))
    reports_to_csv(reports, result_dir / "per_class.csv")
    subgroup_summary_to_csv(subgroup_summary(reports), result_dir / "subgroups.csv")
    if robustness:
        run_robustness_suite(
            predict,
            samples,
            patch_edge,
            stride,
            csv_path=result_dir / "robustness.csv",
        )
    return reports


SUMMARY_CSV_COLUMNS = (
    "variant",
    "seed",
    "subject_id",
    "ga",
    "subgroup",
    "macro_dsc",
    "macro_hd95",
    "macro_assd",
)


def run_study(spec: StudySpec, out_dir) -> Path:
    """Train and evaluate every variant x seed; write results and report."""
    apply_determinism()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec.to_json(out_dir / "spec.json")

    cohort_dir = out_dir / "cohort"
    manifest, test_manifest, atlas_dir = build_cohort_files(spec.cohort, cohort_dir)

    results_root = out_dir / "results"
    results_root.mkdir(exist_ok=True)
    # every run trains off its own manifest copy; run dirs all sit at the
    # same depth, so the adjusted relative paths (and hence the manifest
    # bytes) are identical across runs, which the harness tests assert
    run_entries = [
        {**e, "image_path": f"../../../cohort/{e['image_path']}",
         "labels_path": f"../../../cohort/{e['labels_path']}"}
        for e in load_manifest(manifest)
    ]
    summary_rows = []
    for variant in spec.variants:
        for seed in spec.seeds:
            run_dir = out_dir / "runs" / variant / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            write_manifest(run_dir / "manifest.json", run_entries)
            cfg = variant_train_config(spec, variant, seed)
            result = train(cfg, run_dir / "manifest.json", atlas_dir, run_dir)
            rdir = results_root / variant / f"seed{seed}"
            reports = evaluate_run(
                result.best_path,
                test_manifest,
                atlas_dir,
                rdir,
                cfg.patch_edge,
                cfg.stride,
                cfg.infer_batch,
                robustness=(spec.study == "robustness"),
            )
            for r in reports:
                summary_rows.append(
                    [
                        variant,
                        seed,
                        r.subject_id,
                        f"{r.ga:.6f}",
                        r.subgroup,
                        _fmt(r.macro_dsc),
                        _fmt(r.macro_hd95),
                        _fmt(r.macro_assd),
                    ]
                )
    with open(results_root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_CSV_COLUMNS)
        w.writerows(summary_rows)
    emit_report(out_dir)
    return out_dir


# --- paired statistics -------------------------------------------------------


@dataclass
class PairedStats:
    n: int
    mean_diff: float
    sd_diff: float
    t_stat: float
    n_pos: int
    n_neg: int
    n_zero: int


def compare_paired(a: dict, b: dict) -> PairedStats:
    """Paired per-key differences a - b; keys must match exactly.

    With zero SD the t statistic is 0 for a zero mean and signed infinity
    otherwise (degenerate but well-ordered for ranking).
    """
    if set(a) != set(b):
        raise ValueError("paired comparison needs identical subject keys")
    if not a:
        raise ValueError("paired comparison needs at least one subject")
    keys = sorted(a)
    diffs = np.array([a[k] - b[k] for k in keys], dtype=np.float64)
    n = len(diffs)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
    else:
        t = mean / (sd / math.sqrt(n))
    return PairedStats(
        n=n,
        mean_diff=mean,
        sd_diff=sd,
        t_stat=t,
        n_pos=int((diffs > 0).sum()),
        n_neg=int((diffs < 0).sum()),
        n_zero=int((diffs == 0).sum()),
    )


# --- report emission ---------------------------------------------------------


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _load_summary(out_dir: Path):
    path = Path(out_dir) / "results" / "summary.csv"
    if not path.exists():
        raise FileNotFoundError(f"no summary at {path}; run the study first")
    return _read_csv(path)


def _mean_sd_str(vals) -> tuple[str, str]:
    arr = np.array([float(v) for v in vals if v != ""], dtype=np.float64)
    if len(arr) == 0:
        return "", ""
    sd = arr.std(ddof=1) if len(arr) > 1 else 0.0
    return f"{arr.mean():.6f}", f"{sd:.6f}"


def emit_report(out_dir) -> Path:
    """Aggregate result CSVs into report tables and figures.

    Purely a function of the results directory: emitting twice changes
    nothing. Missing variants produce a warning and a partial report.
    """
    out_dir = Path(out_dir)
    spec = StudySpec.from_json(out_dir / "spec.json")
    rows = _load_summary(out_dir)
    report_dir = out_dir / "report"
    report_dir.mkdir(exist_ok=True)

    present = [v for v in spec.variants if any(r["variant"] == v for r in rows)]
    missing = [v for v in spec.variants if v not in present]
    if missing:
        print(f"warning: partial report, no results for variants {missing}", file=sys.stderr)

    def vrows(v):
        return [r for r in rows if r["variant"] == v]

    # Table-1 analogue: one row per variant, DSC / 95HD(mm) / ASSD(mm)
    with open(report_dir / "table_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network", "n", "dsc_mean", "dsc_sd", "hd95_mm_mean",
                    "hd95_mm_sd", "assd_mm_mean", "assd_mm_sd"])
        for v in present:
            rs = vrows(v)
            dm, ds = _mean_sd_str(r["macro_dsc"] for r in rs)
            hm, hs = _mean_sd_str(r["macro_hd95"] for r in rs)
            am, as_ = _mean_sd_str(r["macro_assd"] for r in rs)
            w.writerow([v, len(rs), dm, ds, hm, hs, am, as_])

    # Table-2 analogue: per-tissue DSC means
    with open(report_dir / "table_tissues.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network"] + list(TISSUE_NAMES[1:]))
        for v in present:
            cells = [v]
            for tissue in TISSUE_NAMES[1:]:
                vals = []
                for seed in spec.seeds:
                    pc = out_dir / "results" / v / f"seed{seed}" / "per_class.csv"
                    if pc.exists():
                        vals += [
                            float(r["dsc"])
                            for r in _read_csv(pc)
                            if r["tissue"] == tissue and r["dsc"] != ""
                        ]
                cells.append(f"{np.mean(vals):.6f}" if vals else "")
            w.writerow(cells)

    # study-shaped variant table (Table 3 / 4 / 5 analogues)
    with open(report_dir / "table_variants.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        if spec.study == "ablate_fusion":
            w.writerow(["network", "atlas_branch", "sa", "msa", "dsc_mean", "dsc_sd"])
            marks = {
                "unet": (0, 0, 0),
                "unet+msa": (0, 0, 1),
                "concat": (1, 0, 0),
                "sa": (1, 1, 0),
                "msa": (1, 0, 1),
            }
            for v in spec.variants:
                dm, ds = _mean_sd_str(r["macro_dsc"] for r in vrows(v))
                w.writerow([v, *marks[v], dm, ds])
        elif spec.study == "ablate_position":
            positions = list(fusion_position_ids(4))
            w.writerow(["network"] + positions + ["dsc_mean", "dsc_sd"])
            for v in spec.variants:
                dm, ds = _mean_sd_str(r["macro_dsc"] for r in vrows(v))
                active = set(POSITION_SETS[v])
                w.writerow([v] + [int(p in active) for p in positions] + [dm, ds])
        elif spec.study == "ablate_channels":
            w.writerow(["channel_number", "dsc_mean", "dsc_sd"])
            for v in spec.variants:
                dm, ds = _mean_sd_str(r["macro_dsc"] for r in vrows(v))
                w.writerow([v, dm, ds])
        else:
            w.writerow(["network", "dsc_mean", "dsc_sd"])
            for v in present:
                dm, ds = _mean_sd_str(r["macro_dsc"] for r in vrows(v))
                w.writerow([v, dm, ds])

    # Fig-3 analogue: subgroup clusters x metrics per variant
    fig3_rows = []
    for v in present:
        for sg in SUBGROUP_NAMES:
            rs = [r for r in vrows(v) if r["subgroup"] == sg]
            if not rs:
                continue
            dm, ds = _mean_sd_str(r["macro_dsc"] for r in rs)
            hm, hs = _mean_sd_str(r["macro_hd95"] for r in rs)
            am, as_ = _mean_sd_str(r["macro_assd"] for r in rs)
            fig3_rows.append([v, sg, len(rs), dm, ds, hm, hs, am, as_])
    with open(report_dir / "fig3_subgroups.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network", "subgroup", "n", "dsc_mean", "dsc_sd",
                    "hd95_mean", "hd95_sd", "assd_mean", "assd_sd"])
        w.writerows(fig3_rows)
    _plot_subgroups(fig3_rows, present, report_dir / "fig3_subgroups.svg")

    # paired stats vs the study's reference variant
    ref = REFERENCE_VARIANT[spec.study]
    with open(report_dir / "paired_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network", "reference", "n", "mean_diff", "sd_diff",
                    "t_stat", "n_pos", "n_neg", "n_zero"])
        if ref in present:
            ref_vals = {
                (r["seed"], r["subject_id"]): float(r["macro_dsc"])
                for r in vrows(ref)
            }
            for v in present:
                if v == ref:
                    continue
                vals = {
                    (r["seed"], r["subject_id"]): float(r["macro_dsc"])
                    for r in vrows(v)
                }
                st = compare_paired(vals, ref_vals)
                w.writerow([v, ref, st.n, f"{st.mean_diff:.6f}", f"{st.sd_diff:.6f}",
                            f"{st.t_stat:.6f}" if math.isfinite(st.t_stat) else str(st.t_stat),
                            st.n_pos, st.n_neg, st.n_zero])
        else:
            print(f"warning: reference variant {ref} absent, no paired stats", file=sys.stderr)

    if spec.study == "robustness":
        _emit_robustness_report(out_dir, spec, present, report_dir)
    return report_dir


def _emit_robustness_report(out_dir: Path, spec: StudySpec, present, report_dir: Path):
    rows_out = []
    curves_by_variant = {}
    for v in present:
        acc: dict[tuple, list] = {}
        for seed in spec.seeds:
            rp = out_dir / "results" / v / f"seed{seed}" / "robustness.csv"
            if not rp.exists():
                continue
            for r in _read_csv(rp):
                acc.setdefault((r["kind"], float(r["value"])), []).append(float(r["mean_dsc"]))
        curve = {}
        for (kind, value), vals in sorted(acc.items()):
            mean = float(np.mean(vals))
            rows_out.append([v, kind, f"{value:.6f}", f"{mean:.6f}", len(vals)])
            curve.setdefault(kind, []).append((value, mean))
        curves_by_variant[v] = curve
    with open(report_dir / "fig5_robustness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["network", "kind", "value", "mean_dsc", "n_seeds"])
        w.writerows(rows_out)
    _plot_robustness_by_variant(curves_by_variant, report_dir / "fig5_robustness.svg")


def _plot_subgroups(fig3_rows, variants, svg_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = [("dsc", 3, 4), ("hd95", 5, 6), ("assd", 7, 8)]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    width = 0.8 / max(1, len(variants))
    for ax, (name, mi, si) in zip(axes, metrics):
        for k, v in enumerate(variants):
            xs, ys, es = [], [], []
            for j, sg in enumerate(SUBGROUP_NAMES):
                row = next((r for r in fig3_rows if r[0] == v and r[1] == sg), None)
                if row is None or row[mi] == "":
                    continue
                xs.append(j + k * width)
                ys.append(float(row[mi]))
                es.append(float(row[si]) if row[si] != "" else 0.0)
            if xs:
                ax.bar(xs, ys, width=width, yerr=es, capsize=2, label=v)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(SUBGROUP_NAMES))])
        ax.set_xticklabels(SUBGROUP_NAMES, rotation=20, fontsize=8)
        ax.set_title(name)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def _plot_robustness_by_variant(curves_by_variant, svg_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kinds = ("gamma_low", "gamma_high", "noise")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for ax, kind in zip(axes, kinds):
        for v, curve in curves_by_variant.items():
            pts = sorted(curve.get(kind, []))
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=v)
        ax.set_title(kind)
        ax.set_ylabel("mean macro DSC")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
