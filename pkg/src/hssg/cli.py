"""Command-line entry point.

Subcommands: gen (synthetic dataset with a scene-level 0.8/0.1/0.1 split),
train, eval (incremental protocol, JSON metric report), predict (per-frame
global-graph snapshots as JSON lines), gradcheck.

Settings come from an INI config file ([run], [data], [model], [train]
sections, key=value) with command-line overrides; unknown keys are
rejected and the effective configuration is echoed into the output
directory. Exit codes: 0 success, 1 failed checks, 2 configuration
errors, 3 data errors, 4 numeric errors.
"""

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .datagen import (
    SyntheticSceneSpec,
    generate_dataset,
    load_embedding_table,
    pseudo_embedding_table,
    read_scene_file,
    write_scene_file,
)
from .errors import ConfigError, DataError, HssgError, NumericError
from .gradcheck import format_table, run_all
from .metrics import MetricAccumulator
from .model import ModelConfig, init_params
from .optim import AdamState
from .rng import stream_rng
from .scene import LabelFeatureBuilder, export_global_graph
from .tensor import Tensor
from .train import (
    EarlyStopper,
    TrainConfig,
    build_prediction_examples,
    build_training_examples,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 10
    objects: int = 8
    frames: int = 6
    points: int = 320
    noise: float = 0.01
    room_x: float = 6.0
    room_y: float = 6.0
    room_z: float = 3.0
    embedding_table: str = None

    def scene_spec(self, seed: int) -> SyntheticSceneSpec:
        return SyntheticSceneSpec(
            num_objects=self.objects,
            frames_per_scene=self.frames,
            points_per_instance=self.points,
            noise_std=self.noise,
            room=(self.room_x, self.room_y, self.room_z),
            seed=seed,
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    embedding_seed: int = 0
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "embedding_seed": self.embedding_seed,
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        obj = json.loads(text)
        model = {k: (tuple(v) if isinstance(v, list) else v) for k, v in obj["model"].items()}
        return cls(
            seed=obj["seed"],
            embedding_seed=obj.get("embedding_seed", 0),
            data=DataConfig(**obj["data"]),
            model=ModelConfig(**model),
            train=TrainConfig(**obj["train"]),
        )


_SECTION_FIELDS = {
    "run": {"seed": int, "embedding_seed": int},
    "data": {
        "scenes": int, "objects": int, "frames": int, "points": int,
        "noise": float, "room_x": float, "room_y": float, "room_z": float,
        "embedding_table": str,
    },
    "model": {
        "variant": str, "feature_mode": str, "collision_layer": str,
        "hidden_dim": int, "heads": int, "dropout": float, "embedding_dim": int,
    },
    "train": {
        "max_epochs": int, "patience": int, "lr": float, "gamma": float,
        "step_size": int, "falsify": float, "teacher_forcing": bool,
        "alpha": float, "alpha_mode": str,
    },
}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"cannot read config file {path}")
    values = {"run": {}, "data": {}, "model": {}, "train": {}}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            typ = _SECTION_FIELDS[section][key]
            try:
                values[section][key] = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from e
    return RunConfig(
        seed=values["run"].get("seed", 0),
        embedding_seed=values["run"].get("embedding_seed", 0),
        data=DataConfig(**values["data"]),
        model=ModelConfig(**values["model"]),
        train=TrainConfig(**values["train"]),
    )


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    model = cfg.model
    if getattr(args, "variant", None):
        model = replace(model, variant=args.variant)
    if getattr(args, "feature_mode", None):
        model = replace(model, feature_mode=args.feature_mode)
    if getattr(args, "collision_layer", None):
        model = replace(model, collision_layer=args.collision_layer)
    cfg = replace(cfg, model=model)
    if getattr(args, "falsify", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, falsify=args.falsify))
    return cfg


def _load_config_for(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args)


def _echo_config(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")


def _feature_builder(cfg: RunConfig, label_space):
    mode = cfg.model.feature_mode
    if mode != "embedding":
        return LabelFeatureBuilder(mode, label_space), cfg
    if cfg.data.embedding_table:
        table = load_embedding_table(cfg.data.embedding_table, label_space.object_classes)
    else:
        table = pseudo_embedding_table(label_space.object_classes, cfg.model.embedding_dim,
                                       cfg.embedding_seed)
    if table.dim != cfg.model.embedding_dim:
        cfg = replace(cfg, model=replace(cfg.model, embedding_dim=table.dim))
    return LabelFeatureBuilder(mode, label_space, table), cfg


def _sync_label_space(cfg: RunConfig, label_space) -> RunConfig:
    model = replace(
        cfg.model,
        num_object_classes=label_space.num_objects,
        num_predicate_classes=label_space.num_predicates,
    )
    return replace(cfg, model=model)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config_for(args)
    out_dir = Path(args.out)
    spec = cfg.data.scene_spec(cfg.seed)
    sequences = generate_dataset(spec, cfg.data.scenes)

    n = len(sequences)
    n_val = n // 10
    n_test = n // 10
    order = np.arange(n)
    stream_rng(cfg.seed, "split").shuffle(order)
    val_ids = set(order[:n_val].tolist())
    test_ids = set(order[n_val:n_val + n_test].tolist())

    splits = {"train": [], "val": [], "test": []}
    for i, seq in enumerate(sequences):
        if i in val_ids:
            splits["val"].append(seq)
        elif i in test_ids:
            splits["test"].append(seq)
        else:
            splits["train"].append(seq)

    _echo_config(cfg, out_dir)
    for name, seqs in splits.items():
        write_scene_file(out_dir / f"{name}.jsonl", seqs)
        if not seqs:
            print(f"warning: split {name!r} is empty ({n} scenes; "
                  "need at least 10 for non-empty val/test)", file=sys.stderr)
    print(f"wrote {n} scenes to {out_dir} "
          f"(train {len(splits['train'])}, val {len(splits['val'])}, test {len(splits['test'])})")
    return EXIT_OK


def _load_split(data_dir: Path, name: str):
    path = data_dir / f"{name}.jsonl"
    if not path.exists():
        raise DataError(f"missing split file {path}")
    return read_scene_file(path)


def _save_train_state(out_dir: Path, params, adam: AdamState, stopper: EarlyStopper,
                      epoch: int):
    ckpt.save_tensors(out_dir / "last.ckpt", {k: p.data for k, p in params.items()})
    ckpt.save_tensors(out_dir / "train_state.ckpt", adam.to_arrays())
    state = {
        "epoch": epoch,
        "best_val": stopper.best,
        "best_epoch": stopper.best_epoch,
        "bad_epochs": stopper.bad_epochs,
    }
    (out_dir / "train_state.json").write_text(json.dumps(state, sort_keys=True) + "\n",
                                              encoding="utf-8")


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    resume = bool(args.resume)
    if resume:
        cfg_path = out_dir / "config.json"
        if not cfg_path.exists():
            raise DataError(f"cannot resume: {cfg_path} is missing")
        cfg = RunConfig.from_json(cfg_path.read_text(encoding="utf-8"))
    else:
        cfg = _load_config_for(args)

    data_dir = Path(args.data)
    train_seqs = _load_split(data_dir, "train")
    val_seqs = _load_split(data_dir, "val")
    if not train_seqs:
        raise DataError(f"no training scenes in {data_dir}")
    label_space = train_seqs[0].label_space
    cfg = _sync_label_space(cfg, label_space)
    features, cfg = _feature_builder(cfg, label_space)
    model_cfg = cfg.model
    train_cfg = replace(cfg.train, seed=cfg.seed).resolved(model_cfg.variant)

    params = None
    adam = None
    stopper = None
    start_epoch = 1
    if resume:
        arrays = ckpt.load_tensors(out_dir / "last.ckpt")
        params = _params_from_arrays(model_cfg, arrays)
        adam = AdamState.from_arrays(params, ckpt.load_tensors(out_dir / "train_state.ckpt"))
        state = json.loads((out_dir / "train_state.json").read_text(encoding="utf-8"))
        stopper = EarlyStopper(train_cfg.patience)
        stopper.best = state["best_val"]
        stopper.best_epoch = state["best_epoch"]
        stopper.bad_epochs = state["bad_epochs"]
        start_epoch = state["epoch"] + 1

    refresh = None
    if train_cfg.teacher_forcing:
        train_examples, falsified = build_training_examples(
            train_seqs, features, model_cfg, cfg.seed, train_cfg.falsify)
    else:
        train_examples, falsified = [], 0

        def refresh(current_params, _epoch):
            return build_prediction_examples(
                train_seqs, features, model_cfg, current_params, cfg.seed, train_cfg.falsify)

    # validation stays uncorrupted: early stopping and checkpoint selection
    # should track true quality, not the injected label noise
    val_examples, _ = build_training_examples(val_seqs, features, model_cfg, cfg.seed + 1, 0.0)

    _echo_config(cfg, out_dir)
    history_path = out_dir / "history.jsonl"
    mode = "a" if resume else "w"
    history_file = open(history_path, mode, encoding="utf-8")
    if not resume:
        header = {
            "event": "start",
            "falsify": train_cfg.falsify,
            "falsified_labels": falsified,
            "train_frames": len(train_examples),
            "val_frames": len(val_examples),
        }
        history_file.write(json.dumps(header, sort_keys=True) + "\n")
        history_file.flush()

    def on_epoch(epoch, row, current_params, adam_state, stop, best_params):
        history_file.write(json.dumps(row, sort_keys=True) + "\n")
        history_file.flush()
        _save_train_state(out_dir, current_params, adam_state, stop, epoch)
        if best_params is not None and stop.best_epoch == epoch:
            ckpt.save_tensors(out_dir / "best.ckpt", {k: p.data for k, p in best_params.items()})

    try:
        result = train(
            train_examples, val_examples, model_cfg, train_cfg, label_space,
            params=params, adam=adam, stopper=stopper, start_epoch=start_epoch,
            on_epoch=on_epoch, refresh_examples=refresh,
        )
    finally:
        history_file.close()

    print(f"best epoch {result.best_epoch} (val loss {result.best_val:.6f}); "
          f"checkpoints in {out_dir}")
    return EXIT_OK


def _params_from_arrays(model_cfg: ModelConfig, arrays: dict) -> dict:
    expected = init_params(model_cfg, 0)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(expected))[:3]
        raise ConfigError(
            f"checkpoint does not match the model configuration "
            f"(missing {missing}, unexpected {extra})"
        )
    params = {}
    for name, ref in expected.items():
        if arrays[name].shape != ref.data.shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {arrays[name].shape}, "
                f"model expects {ref.data.shape}"
            )
        params[name] = Tensor(arrays[name].copy(), requires_grad=True)
    return params


def _resolve_checkpoint(args):
    path = Path(args.checkpoint)
    if path.is_dir():
        ckpt_path = path / "best.ckpt"
        cfg_path = path / "config.json"
    else:
        ckpt_path = path
        cfg_path = path.parent / "config.json"
    if args.config:
        cfg = load_run_config(args.config)
    elif cfg_path.exists():
        cfg = RunConfig.from_json(cfg_path.read_text(encoding="utf-8"))
    else:
        raise ConfigError(f"no configuration found: pass --config or keep config.json next to {ckpt_path}")
    if not ckpt_path.exists():
        raise DataError(f"checkpoint file {ckpt_path} does not exist")
    return ckpt_path, cfg


def cmd_eval(args) -> int:
    ckpt_path, cfg = _resolve_checkpoint(args)
    sequences = _load_split(Path(args.data), args.split)
    if sequences:
        label_space = sequences[0].label_space
        if (label_space.num_objects != cfg.model.num_object_classes
                or label_space.num_predicates != cfg.model.num_predicate_classes):
            raise ConfigError(
                f"label space of {args.data} ({label_space.num_objects} objects, "
                f"{label_space.num_predicates} predicates) does not match the checkpoint "
                f"({cfg.model.num_object_classes}, {cfg.model.num_predicate_classes})"
            )
        features, cfg = _feature_builder(cfg, label_space)
        params = _params_from_arrays(cfg.model, ckpt.load_tensors(ckpt_path))
        report = evaluate(sequences, cfg.model, params, features,
                          run_seed=cfg.seed, falsify_eval=args.falsify_eval or 0.0)
    else:
        report = MetricAccumulator(cfg.model.num_predicate_classes).report()
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt_path, cfg = _resolve_checkpoint(args)
    sequences = read_scene_file(args.scene)
    lines = []
    if sequences:
        label_space = sequences[0].label_space
        cfg = _sync_label_space(cfg, label_space)
        features, cfg = _feature_builder(cfg, label_space)
        params = _params_from_arrays(cfg.model, ckpt.load_tensors(ckpt_path))

        def after_merge(seq, frame, graph):
            lines.extend(export_global_graph(graph, frame.frame_index))

        evaluate(sequences, cfg.model, params, features, run_seed=cfg.seed,
                 on_merged=after_merge)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    print(f"wrote {len(lines)} lines to {out_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows, all_ok, elapsed = run_all(coords_per_tensor=args.coords, corrupt=args.corrupt)
    print(format_table(rows))
    print(f"{sum(1 for r in rows if r[2])}/{len(rows)} checks passed in {elapsed:.1f}s")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hssg",
        description="Incremental scene-graph prediction: data generation, "
                    "training, evaluation, prediction, gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_model_flags=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        if with_model_flags:
            p.add_argument("--variant", choices=("homo_sage", "het_sage", "hgt"))
            p.add_argument("--feature-mode", dest="feature_mode",
                           choices=("plain", "label", "embedding"))
            p.add_argument("--collision-layer", dest="collision_layer",
                           choices=("none", "add", "add_only"))

    p = sub.add_parser("gen", help="generate a synthetic dataset with splits")
    common(p, with_model_flags=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from `gen`")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--falsify", type=float, default=None,
                   help="fraction of global labels corrupted during training")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoints in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint incrementally")
    common(p, with_model_flags=False)
    p.add_argument("--checkpoint", required=True,
                   help="training output directory or .ckpt file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--falsify-eval", dest="falsify_eval", type=float, default=0.0,
                   help="corrupt evaluation-time global labels")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export per-frame predicted graphs")
    common(p, with_model_flags=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene-sequence JSONL file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all variants")
    p.add_argument("--coords", type=int, default=2,
                   help="coordinates probed per parameter tensor")
    p.add_argument("--corrupt", default=None,
                   help="test hook: sabotage the named check to verify failure reporting")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except HssgError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
