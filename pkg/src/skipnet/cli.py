"""Command-line entry point: generate | train | evaluate | predict | score.

Configuration comes from an INI-style file (sections [run], [data],
[model], [train], [generate]) with command-line overrides; every command
is a pure function of (config, flags, input files, seed) so re-runs are
reproducible.  Exit codes: 0 success, 2 config error, 3 data error,
4 checkpoint error, 1 anything else.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model as mdl
from . import synthgen as gen
from . import train as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (apply_normalization, default_schema, load_schema, load_sessions,
                   load_tracks, make_batches, NormalizationStats, read_predictions,
                   split_sessions, write_predictions, write_sessions, write_tracks)
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     SkipnetError)
from .metrics import mean_average_accuracy


@dataclass
class DataConfig:
    sessions: str = "sessions.csv"
    tracks: str = "tracks.csv"
    schema: str = ""              # empty = built-in default schema
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split: str = "test"           # which split evaluate reports on


@dataclass
class ModelDims:
    track_fc_dim: int = 64
    interaction_fc_dim: int = 64
    sessrep_hidden: int = 64
    enc_fc_dim: int = 128
    enc_hidden: int = 128
    dec_final_hidden: int = 128
    hard_feedback: bool = False


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 3
    min_delta: float = 1e-4
    clip_norm: float = 5.0


@dataclass
class GenerateSection:
    n_sessions: int = 10000
    persistence: float = 1.0
    feature_effect: float = 1.0
    user_propensity_std: float = 0.5
    skip1_gate: float = gen.SKIP1_GATE
    skip3_gate: float = gen.SKIP3_GATE
    calibrate: bool = False       # re-calibrate base logits before generating


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)


_SECTIONS = {"run": None, "data": DataConfig, "model": ModelDims,
             "train": TrainSection, "generate": GenerateSection}
_RUN_KEYS = {"seed": int, "workers": int}


def _parse_value(raw, kind, section, key):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") \
            from None


def load_config(path=None):
    """RunConfig from an INI file; unknown sections or keys are rejected."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if section == "run":
            for key, raw in parser.items(section):
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [run]")
                setattr(cfg, key, _parse_value(raw, _RUN_KEYS[key], section, key))
            continue
        section_cls = _SECTIONS[section]
        kinds = {f.name: type(getattr(section_cls(), f.name)) for f in fields(section_cls)}
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in kinds:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _parse_value(raw, kinds[key], section, key))
    _validate(cfg)
    return cfg


def _validate(cfg):
    d = cfg.data
    fracs = (d.train_fraction, d.val_fraction, d.test_fraction)
    if any(f < 0 for f in fracs) or sum(fracs) > 1 + 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to <= 1, got {fracs}")
    if d.split not in ("train", "val", "test", "all"):
        raise ConfigError(f"[data] split must be train|val|test|all, got {d.split!r}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    for name in ("track_fc_dim", "interaction_fc_dim", "sessrep_hidden",
                 "enc_fc_dim", "enc_hidden", "dec_final_hidden"):
        if getattr(cfg.model, name) < 1:
            raise ConfigError(f"[model] {name} must be positive")
    t = cfg.train
    if min(t.learning_rate, t.batch_size, t.max_epochs, t.min_delta, t.clip_norm) <= 0 \
            or t.patience < 1:
        raise ConfigError("[train] values must be positive, patience >= 1")
    if cfg.generate.n_sessions < 0:
        raise ConfigError("[generate] n_sessions must be >= 0")


def _schema_for(cfg, data_dir):
    if cfg.data.schema:
        return load_schema(os.path.join(data_dir, cfg.data.schema)
                           if not os.path.isabs(cfg.data.schema) else cfg.data.schema)
    return default_schema()


def _data_paths(cfg, data_dir):
    def resolve(name):
        return name if os.path.isabs(name) else os.path.join(data_dir, name)
    return resolve(cfg.data.sessions), resolve(cfg.data.tracks)


def _gen_config(cfg):
    g = cfg.generate
    return gen.GenConfig(n_sessions=g.n_sessions, persistence=g.persistence,
                         feature_effect=g.feature_effect,
                         user_propensity_std=g.user_propensity_std,
                         skip1_gate=g.skip1_gate, skip3_gate=g.skip3_gate,
                         seed=cfg.seed)


def _model_config(cfg, schema):
    m = cfg.model
    return mdl.config_for_schema(schema, track_fc_dim=m.track_fc_dim,
                                 interaction_fc_dim=m.interaction_fc_dim,
                                 sessrep_hidden=m.sessrep_hidden,
                                 enc_fc_dim=m.enc_fc_dim, enc_hidden=m.enc_hidden,
                                 dec_final_hidden=m.dec_final_hidden,
                                 hard_feedback=m.hard_feedback, seed=cfg.seed)


def _train_config(cfg):
    t = cfg.train
    return tr.TrainConfig(learning_rate=t.learning_rate, beta1=t.beta1, beta2=t.beta2,
                          eps=t.eps, batch_size=t.batch_size, max_epochs=t.max_epochs,
                          patience=t.patience, min_delta=t.min_delta,
                          clip_norm=t.clip_norm, workers=cfg.workers, seed=cfg.seed)


def _split(cfg, sessions):
    d = cfg.data
    return split_sessions(sessions, (d.train_fraction, d.val_fraction, d.test_fraction),
                          seed=cfg.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    schema = default_schema() if not cfg.data.schema else _schema_for(cfg, out_dir)
    gen_cfg = _gen_config(cfg)
    if cfg.generate.calibrate:
        gen_cfg = gen.calibrate(gen_cfg)
    dataset = gen.generate_dataset(gen_cfg, schema)
    write_sessions(os.path.join(out_dir, cfg.data.sessions), dataset.sessions, schema)
    write_tracks(os.path.join(out_dir, cfg.data.tracks), dataset.tracks, schema)
    report_path = os.path.join(out_dir, "gen_report.txt")
    if not dataset.sessions:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write("n_sessions=0\nempty=1\n")
        return 0
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(gen.report(dataset, gen_cfg).serialize())
    return 0


def _load_labeled(cfg, data_dir):
    schema = _schema_for(cfg, data_dir)
    sessions_path, tracks_path = _data_paths(cfg, data_dir)
    tracks = load_tracks(tracks_path, schema)
    sessions = load_sessions(sessions_path, tracks, schema, mode="labeled")
    return schema, tracks, sessions


def cmd_train(cfg, data_dir, out_dir, checkpoint=None):
    os.makedirs(out_dir, exist_ok=True)
    schema, tracks, sessions = _load_labeled(cfg, data_dir)
    train_sessions, val_sessions, _ = _split(cfg, sessions)
    if not train_sessions or not val_sessions:
        raise DataError("train and validation splits must be nonempty")

    train_cfg = _train_config(cfg)
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint, expected_fingerprint=schema.fingerprint())
        params, adam = ckpt.params, ckpt.adam_state
        start_epoch = int(ckpt.extras["epoch"])
        val_losses = list(ckpt.extras["val_losses"])
        stats = NormalizationStats.from_json_dict(ckpt.extras["normalization"])
    else:
        params = mdl.init_model_params(_model_config(cfg, schema))
        adam = tr.init_adam_state(params)
        start_epoch = 0
        val_losses = []
        stats = None

    if stats is None:
        from .data import fit_normalization
        stats = fit_normalization(train_sessions, tracks, schema)
    norm_train, norm_tracks = apply_normalization(train_sessions, tracks, stats, schema)
    norm_val, _ = apply_normalization(val_sessions, tracks, stats, schema)

    log_path = os.path.join(out_dir, "train.log")
    log_mode = "a" if checkpoint is not None and os.path.exists(log_path) else "w"
    log_fh = open(log_path, log_mode, encoding="utf-8")
    stats_json = stats.to_json_dict()

    def hook(epoch_stats, cur_params, cur_adam, cur_val_losses, improved):
        log_fh.write(epoch_stats.log_line() + "\n")
        log_fh.flush()
        extras = {"epoch": epoch_stats.epoch, "val_losses": list(cur_val_losses),
                  "normalization": stats_json, "train_config": train_cfg.to_json_dict()}
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), cur_params,
                        schema.fingerprint(), adam_state=cur_adam, extras=extras)
        if improved:
            save_checkpoint(os.path.join(out_dir, "best.ckpt"), cur_params,
                            schema.fingerprint(),
                            extras={"epoch": epoch_stats.epoch,
                                    "normalization": stats_json,
                                    "train_config": train_cfg.to_json_dict()})

    try:
        tr.run_training(params, adam, norm_train, norm_val, norm_tracks, schema,
                        train_cfg, start_epoch=start_epoch, val_losses=val_losses,
                        epoch_hook=hook)
    finally:
        log_fh.close()
    return 0


def _select_split(cfg, sessions):
    if cfg.data.split == "all":
        return sessions
    train, val, test = _split(cfg, sessions)
    return {"train": train, "val": val, "test": test}[cfg.data.split]


def cmd_evaluate(cfg, data_dir, out_dir, checkpoint):
    os.makedirs(out_dir, exist_ok=True)
    schema, tracks, sessions = _load_labeled(cfg, data_dir)
    ckpt = load_checkpoint(checkpoint, expected_fingerprint=schema.fingerprint())
    subset = _select_split(cfg, sessions)
    if not subset:
        raise DataError(f"split {cfg.data.split!r} is empty")
    stats = NormalizationStats.from_json_dict(ckpt.extras["normalization"])
    norm_sessions, norm_tracks = apply_normalization(subset, tracks, stats, schema)
    model_report, baseline_report = tr.evaluate(ckpt.params, norm_sessions,
                                                norm_tracks, schema)
    # baseline reads raw skip flags, identical before/after normalization
    text = "".join(f"model.{line}\n" for line in model_report.serialize().splitlines())
    text += "".join(f"baseline.{line}\n" for line in baseline_report.serialize().splitlines())
    with open(os.path.join(out_dir, "eval_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(cfg, data_dir, out_dir, checkpoint):
    os.makedirs(out_dir, exist_ok=True)
    schema = _schema_for(cfg, data_dir)
    sessions_path, tracks_path = _data_paths(cfg, data_dir)
    tracks = load_tracks(tracks_path, schema)
    sessions = load_sessions(sessions_path, tracks, schema, mode="prediction")
    ckpt = load_checkpoint(checkpoint, expected_fingerprint=schema.fingerprint())
    stats = NormalizationStats.from_json_dict(ckpt.extras["normalization"])
    norm_sessions, norm_tracks = apply_normalization(sessions, tracks, stats, schema)

    ids, preds = [], []
    for batch in make_batches(norm_sessions, norm_tracks, schema, 256):
        output = mdl.forward(ckpt.params, batch)
        for sid, pred in zip(batch.session_ids,
                             mdl.predictions_per_session(output, batch.second_lengths)):
            ids.append(sid)
            preds.append(pred)
    write_predictions(os.path.join(out_dir, "predictions.txt"), ids, preds)
    return 0


def cmd_score(cfg, data_dir, out_dir, predictions_path):
    os.makedirs(out_dir, exist_ok=True)
    _, _, sessions = _load_labeled(cfg, data_dir)
    preds = read_predictions(predictions_path)
    pairs = []
    for s in sessions:
        if s.session_id not in preds:
            raise DataError(f"no prediction for session {s.session_id!r}")
        pred = preds[s.session_id]
        if len(pred) != len(s.second_tracks):
            raise DataError(f"session {s.session_id!r}: prediction length {len(pred)} "
                            f"!= second half {len(s.second_tracks)}")
        pairs.append((s.labels, pred))
    text = mean_average_accuracy(pairs).serialize()
    with open(os.path.join(out_dir, "score_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="skipnet",
                                     description="Session skip prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write a synthetic dataset and its report"),
                            ("train", "train a model with early stopping"),
                            ("evaluate", "report model and baseline metrics"),
                            ("predict", "write per-session skip predictions"),
                            ("score", "score a predictions file against labels")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI configuration file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--data-dir", default=".", help="directory of input data files")
        p.add_argument("--out-dir", default=".", help="directory for output artifacts")
        p.add_argument("--checkpoint", default=None, help="checkpoint file path")
        p.add_argument("--workers", type=int, default=None,
                       help="data-parallel gradient workers")
        if name == "score":
            p.add_argument("--predictions", required=True, help="predictions file to score")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("workers must be >= 1")
            cfg.workers = args.workers
        if args.command == "generate":
            return cmd_generate(cfg, args.out_dir)
        if args.command == "train":
            return cmd_train(cfg, args.data_dir, args.out_dir, checkpoint=args.checkpoint)
        if args.command == "evaluate":
            if args.checkpoint is None:
                raise ConfigError("evaluate needs --checkpoint")
            return cmd_evaluate(cfg, args.data_dir, args.out_dir, args.checkpoint)
        if args.command == "predict":
            if args.checkpoint is None:
                raise ConfigError("predict needs --checkpoint")
            return cmd_predict(cfg, args.data_dir, args.out_dir, args.checkpoint)
        if args.command == "score":
            return cmd_score(cfg, args.data_dir, args.out_dir, args.predictions)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except (SkipnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
