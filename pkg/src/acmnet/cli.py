"""``acmnet`` command line: data generation, training, embedding, evaluation, ablation."""

import dataclasses
import functools
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import click

from acmnet.augment import GroupKind
from acmnet.datagen import PRESET_CONDITIONS, generate_synthetic_traverse, load_dataset, save_dataset
from acmnet.errors import (
    DomainError,
    FormatError,
    LoadError,
    MismatchError,
    NumericalError,
    ParameterError,
)
from acmnet.evaluation import emit_report, evaluate, plot_bars
from acmnet.model import ModelConfig
from acmnet.retrieval import build_bank, load_bank, save_bank
from acmnet.train import TrainConfig, load_checkpoint, train

log = logging.getLogger("acmnet")

EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_NUMERICAL = 4

SEED_ENV = "ACM_SEED"

PAPER_PINS = {
    "train": {"temperature": 0.01, "loss_weight": 1.0, "learning_rate": 0.003,
              "batch_size": 64, "epochs": 1000},
    "model": {"descriptor_dim": 1024},
}

GROUP_ORDER = (GroupKind.C4_ROTATIONS, GroupKind.ROTATIONS_2D, GroupKind.AFFINE_2D,
               GroupKind.PROJECTIVE_2D)


@dataclass
class EvalSettings:
    ns: tuple = (1, 5, 10)
    window: int = 2
    invariance_samples: int = 2
    measure_images: int = 32
    query_sequence: str = None


@dataclass
class RunConfig:
    profile: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: dict = field(default_factory=dict)

    @classmethod
    def for_profile(cls, profile):
        if profile not in ("desk", "paper"):
            raise ParameterError(f"profile must be 'desk' or 'paper', got {profile!r}")
        cfg = cls(profile=profile)
        if profile == "paper":
            cfg.model = dataclasses.replace(cfg.model, **PAPER_PINS["model"])
            cfg.train = dataclasses.replace(cfg.train, **PAPER_PINS["train"])
        return cfg

    @classmethod
    def from_dict(cls, raw):
        unknown = set(raw) - {"profile", "model", "train", "eval", "paths"}
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls.for_profile(raw.get("profile", "desk"))
        cfg.apply({k: raw[k] for k in ("model", "train", "eval") if k in raw})
        paths = raw.get("paths", {})
        bad = set(paths) - {"data", "out", "checkpoint", "bank"}
        if bad:
            raise ParameterError(f"unknown paths keys: {sorted(bad)}")
        cfg.paths = dict(paths)
        return cfg

    def apply(self, overrides):
        """Merge ``{"model": {...}, "train": {...}, "eval": {...}}`` overrides."""
        for section, values in overrides.items():
            current = getattr(self, section)
            names = {f.name for f in dataclasses.fields(current)}
            unknown = set(values) - names
            if unknown:
                raise ParameterError(f"unknown {section} keys: {sorted(unknown)}")
            if self.profile == "paper":
                for k, v in values.items():
                    pinned = PAPER_PINS.get(section, {}).get(k)
                    if pinned is not None and v != pinned:
                        raise ParameterError(
                            f"the paper profile pins {section}.{k}={pinned}; got {v}")
            if section == "model" and "encoder_channels" in values:
                values = {**values, "encoder_channels": tuple(values["encoder_channels"])}
            if section == "eval" and "ns" in values:
                values = {**values, "ns": tuple(values["ns"])}
            setattr(self, section, dataclasses.replace(current, **values))
        return self

    def to_dict(self):
        return {
            "profile": self.profile,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": {**dataclasses.asdict(self.eval), "ns": list(self.eval.ns)},
            "paths": dict(self.paths),
        }


def load_run_config(path, profile=None):
    if path is None:
        return RunConfig.for_profile(profile or "desk")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParameterError(f"config {path} must hold a JSON object")
    if profile is not None:
        raw = {**raw, "profile": profile}
    return RunConfig.from_dict(raw)


def resolve_seed(flag_seed, config_seed):
    """Flag beats the ACM_SEED environment variable, which beats the config file."""
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ParameterError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return config_seed


def check_clobber(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ParameterError(f"{path} exists and is not empty; pass --force to overwrite")
    if os.path.isfile(path) and not force:
        raise ParameterError(f"{path} exists; pass --force to overwrite")


def _load_data(path):
    if path is None:
        raise ParameterError("--data is required")
    if not os.path.isdir(path):
        raise ParameterError(f"dataset directory {path} does not exist")
    return load_dataset(path)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ParameterError, LoadError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        except (MismatchError, FormatError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_MISMATCH)
        except (NumericalError, DomainError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Appearance-robust, geometry-sensitive place descriptors."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("generate-data")
@click.option("--places", type=int, default=100, show_default=True)
@click.option("--conditions", type=click.IntRange(1, len(PRESET_CONDITIONS)), default=2,
              show_default=True, help="Reference plus up to three shifted conditions.")
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True)
@handle_errors
def generate_data(places, conditions, size, seed, out, force):
    """Render a synthetic traverse to a dataset directory."""
    seed = resolve_seed(seed, 0)
    check_clobber(out, force)
    ds = generate_synthetic_traverse(places, PRESET_CONDITIONS[:conditions], size, seed)
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds)} images ({places} places x {conditions} conditions) to {out}")


def _train_options(fn):
    for opt in reversed([
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None),
        click.option("--profile", type=click.Choice(["desk", "paper"]), default=None),
        click.option("--data", type=click.Path(), default=None),
        click.option("--seed", type=int, default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--max-steps", type=int, default=None),
        click.option("--jobs", type=int, default=None, help="Augmentation threads."),
    ]):
        fn = opt(fn)
    return fn


def _config_from_flags(config_path, profile, seed, epochs, batch_size, max_steps, jobs, **extra):
    cfg = load_run_config(config_path, profile)
    train_over = {"global_seed": resolve_seed(seed, cfg.train.global_seed)}
    for key, val in (("epochs", epochs), ("batch_size", batch_size),
                     ("max_steps", max_steps), ("jobs", jobs)):
        if val is not None:
            train_over[key] = val
    train_over.update({k: v for k, v in extra.items() if v is not None})
    cfg.apply({"train": train_over})
    cfg.train.validate()
    cfg.model.validate()
    return cfg


@main.command("train")
@_train_options
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--no-appearance", is_flag=True, help="Disable the contrastive branch.")
@click.option("--no-geometry", is_flag=True, help="Disable the rotation-prediction branch.")
@click.option("--group", type=click.Choice([g.value for g in GroupKind]), default=None)
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--force", is_flag=True)
@handle_errors
def train_cmd(config_path, profile, data, seed, epochs, batch_size, max_steps, jobs, out,
              no_appearance, no_geometry, group, resume, force):
    """Train a model; writes checkpoints, an NDJSON log and the resolved config."""
    cfg = load_run_config(config_path, profile)
    data = data or cfg.paths.get("data")
    cfg = _config_from_flags(
        config_path, profile, seed, epochs, batch_size, max_steps, jobs,
        enable_appearance_module=False if no_appearance else None,
        enable_geometry_module=False if no_geometry else None,
        geometry_group=group,
    )
    ds = _load_data(data)
    if resume is None:
        check_clobber(out, force)
    os.makedirs(out, exist_ok=True)
    ck = load_checkpoint(resume) if resume else None
    params, records, _ = train(ds, cfg.model, cfg.train, checkpoint_dir=out,
                               log_path=os.path.join(out, "train_log.ndjson"), resume=ck)
    with open(os.path.join(out, "run_config.json"), "w") as fh:
        json.dump({**cfg.to_dict(), "paths": {"data": data, "out": out}}, fh, indent=1)
    last = records[-1] if records else {}
    click.echo(f"trained {len(records)} steps; final L_total={last.get('L_total')}; "
               f"checkpoint {os.path.join(out, 'final.ckpt')}")


@main.command("embed")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--data", type=click.Path(), required=True)
@click.option("--sequence", default=None, help="Sequence to embed (default: reference).")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--force", is_flag=True)
@handle_errors
def embed_cmd(checkpoint, data, sequence, out, force):
    """Embed one sequence into a descriptor bank file."""
    check_clobber(out, force)
    ds = _load_data(data)
    params = load_checkpoint(checkpoint).params
    frames = ds.sequence(sequence) if sequence else ds.reference_frames()
    bank = build_bank(params, frames)
    save_bank(bank, out)
    click.echo(f"wrote bank {out}: {bank.size} x {bank.dim}, fingerprint {bank.fingerprint}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--data", type=click.Path(), required=True)
@click.option("--bank", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--window", type=click.IntRange(min=0), default=None,
              help="Frame tolerance radius (default 2).")
@click.option("--query-sequence", default=None,
              help="Query sequence; the reference sequence id means self-evaluation.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--chart", type=click.Path(dir_okay=False), default=None)
@click.option("--force", is_flag=True)
@handle_errors
def eval_cmd(checkpoint, data, bank, window, query_sequence, config_path, seed, out, chart, force):
    """Evaluate recall@N, pose buckets and the two measures."""
    check_clobber(out, force)
    cfg = load_run_config(config_path)
    ev = cfg.eval
    ds = _load_data(data)
    params = load_checkpoint(checkpoint).params
    bank_obj = load_bank(bank) if bank else None
    report = evaluate(
        params, ds, ns=ev.ns, window_radius=ev.window if window is None else window,
        query_sequence=query_sequence or ev.query_sequence,
        invariance_samples=ev.invariance_samples, measure_images=ev.measure_images,
        seed=resolve_seed(seed, 0), bank=bank_obj,
    )
    emit_report(report, out, chart_path=chart)
    summary = ", ".join(f"R@{n}={v:.3f}" for n, v in sorted(report.recall.items()))
    click.echo(f"{summary}; equivariance={report.equivariance_measure:.3f} "
               f"invariance={report.invariance_measure:.3f}")


@main.command("ablate-geometry")
@_train_options
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True)
@handle_errors
def ablate_geometry(config_path, profile, data, seed, epochs, batch_size, max_steps, jobs, out,
                    force):
    """Train one model per geometric group and compare R@10."""
    cfg = _config_from_flags(config_path, profile, seed, epochs, batch_size, max_steps, jobs)
    ds = _load_data(data or cfg.paths.get("data"))
    check_clobber(out, force)
    os.makedirs(out, exist_ok=True)
    rows = []
    for kind in GROUP_ORDER:
        # same seed stream for every run: only the geometry branch differs
        tcfg = dataclasses.replace(cfg.train, geometry_group=kind.value,
                                   enable_geometry_module=True)
        params, records, _ = train(ds, cfg.model, tcfg,
                                   checkpoint_dir=os.path.join(out, kind.value))
        rep = evaluate(params, ds, ns=cfg.eval.ns, window_radius=cfg.eval.window,
                       invariance_samples=cfg.eval.invariance_samples,
                       measure_images=cfg.eval.measure_images, seed=tcfg.global_seed)
        rows.append({
            "group": kind.value,
            "recall_at_10": rep.recall.get(10),
            "recall": {str(n): v for n, v in sorted(rep.recall.items())},
            "equivariance": rep.equivariance_measure,
            "invariance": rep.invariance_measure,
            "steps": len(records),
        })
        click.echo(f"{kind.value}: R@10={rep.recall.get(10)}")
    table = {"groups": rows, "config": cfg.to_dict()}
    with open(os.path.join(out, "ablation.json"), "w") as fh:
        json.dump(table, fh, indent=1)
    plot_bars({r["group"]: r["recall_at_10"] or 0.0 for r in rows},
              os.path.join(out, "ablation.png"), "R@10", "geometric group ablation")
    click.echo(f"wrote {os.path.join(out, 'ablation.json')} and ablation.png")


if __name__ == "__main__":  # pragma: no cover
    main()
