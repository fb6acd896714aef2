"""Command line: ``vitgan {gen-data,train,infer,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ExperimentConfig, dump_config, load_config
from .data.dataset import (INPUT_SUFFIX, TARGET_SUFFIX, DataError, DirectoryDataset,
                           SyntheticDataset, synth_pair, write_pair)
from .data.imageio import ImageIOError, load_image, save_image
from .generator import build_generator
from .metrics import (EmbeddingFileProvider, NumericError, PooledPixelProvider,
                      SoftmaxClassProvider, evaluate_model, run_generator)
from .tensor import ConfigError, ContractError, DimensionError
from .training import TrainingError, fit, init_state, load_checkpoint, load_generator, save_checkpoint

log = logging.getLogger("vitgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SHEET_GUTTER = 2  # px of white between sheet cells, horizontally and vertically


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        out["train.mode"] = args.mode
    if getattr(args, "out", None) is not None:
        out["out_dir"] = args.out
    return out


def open_dataset(cfg: ExperimentConfig, override_dir=None):
    if override_dir is not None or cfg.data.source == "directory":
        ds = DirectoryDataset(override_dir or cfg.data.dir)
    else:
        ds = SyntheticDataset(cfg.data.synthetic_spec(), cfg.data.count)
    if len(ds) == 0:
        raise DataError("dataset is empty")
    size = cfg.generator.image_size
    first = ds[0]
    if first.input.shape[1:] != (size, size):
        raise DataError(f"dataset images are {first.input.shape[1]}x{first.input.shape[2]}, "
                        f"config expects {size}x{size}")
    return ds


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: ExperimentConfig, count: int, out_dir=None) -> Path:
    spec = cfg.data.synthetic_spec()
    root = Path(out_dir or cfg.data.dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"{root}: cannot create dataset directory ({e.strerror})") from None
    ids = []
    for i in range(count):
        sample = synth_pair(spec, i)
        write_pair(sample, root)
        ids.append(sample.id)
    manifest = {"spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
                "spec_hash": spec.spec_hash(), "count": count, "ids": ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def cmd_train(cfg: ExperimentConfig, resume=None, data_dir=None) -> Path:
    ds = open_dataset(cfg, data_dir)
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    disc_cfg = cfg.discriminator if cfg.train.mode == "cgan_l1" else None
    if resume:
        state = load_checkpoint(resume, cfg.generator, disc_cfg, cfg.train)
        mode = "a"
    else:
        state = init_state(cfg.generator, disc_cfg, cfg.train)
        mode = "w"
    with open(out / cfg.metrics_file, mode) as f:
        fit(state, ds, cfg.train, metrics_out=f, checkpoint_dir=out / "checkpoints"
            if cfg.train.checkpoint_every else None)
    final = out / "final.vitg"
    save_checkpoint(state, final)
    return final


def _as_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


def make_sheet(rows: list[list[np.ndarray | None]], size: int) -> np.ndarray:
    """Grid of (c, size, size) cells; ``None`` cells stay mid-gray.

    Width is ``cols * size + (cols - 1) * SHEET_GUTTER``, likewise for height.
    """
    n_rows, n_cols = len(rows), len(rows[0])
    g = SHEET_GUTTER
    sheet = np.ones((3, n_rows * size + (n_rows - 1) * g, n_cols * size + (n_cols - 1) * g),
                    dtype=np.float32)
    for r, row in enumerate(rows):
        for c, cell in enumerate(row):
            y, x = r * (size + g), c * (size + g)
            sheet[:, y : y + size, x : x + size] = 0.0 if cell is None else _as_rgb(cell)
    return sheet


def _image_id(path: Path) -> str:
    name = path.name
    return name[: -len(INPUT_SUFFIX)] if name.endswith(INPUT_SUFFIX) else path.stem


def cmd_infer(cfg: ExperimentConfig, checkpoint, inputs: list, out_dir) -> list[Path]:
    size = cfg.generator.image_size
    gen = _load_gen(cfg, checkpoint)
    paths = [Path(p) for p in inputs]
    images, targets = [], []
    for p in paths:
        img = load_image(p)
        if img.shape[1:] != (size, size):
            raise DataError(f"{p}: image is {img.shape[1]}x{img.shape[2]} but the checkpoint "
                            f"config expects {size}x{size}")
        if img.shape[0] != cfg.generator.in_channels:
            raise DataError(f"{p}: {img.shape[0]} channels, generator expects "
                            f"{cfg.generator.in_channels}")
        images.append(img)
        tpath = p.with_name(_image_id(p) + TARGET_SUFFIX)
        targets.append(load_image(tpath) if p.name.endswith(INPUT_SUFFIX) and tpath.exists()
                       else None)
    outs = run_generator(gen, np.stack(images))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p, o in zip(paths, outs):
        dest = out / f"{_image_id(p)}.output.png"
        save_image(o, dest)
        written.append(dest)
    with_target = any(t is not None for t in targets)
    rows = [[i, t, o] if with_target else [i, o] for i, t, o in zip(images, targets, outs)]
    sheet = out / "sheet.png"
    save_image(make_sheet(rows, size), sheet)
    written.append(sheet)
    return written


def _load_gen(cfg: ExperimentConfig, checkpoint):
    if cfg.generator.kind == "identity" and checkpoint is None:
        return build_generator(cfg.generator)
    if checkpoint is None:
        raise ConfigError("--checkpoint is required for a vit generator")
    return load_generator(checkpoint, cfg.generator)


def make_providers(cfg: ExperimentConfig):
    m = cfg.metrics
    if m.provider == "embedding_file":
        feats = EmbeddingFileProvider(m.embedding_file, m.embedding_dim)
    else:
        feats = PooledPixelProvider(m.grid)
    return feats, SoftmaxClassProvider(feats, m.temperature)


def cmd_eval(cfg: ExperimentConfig, checkpoint, data_dir=None, out_dir=None):
    ds = open_dataset(cfg, data_dir)
    gen = _load_gen(cfg, checkpoint)
    feats, probs = make_providers(cfg)
    report = evaluate_model(gen, ds, feats, probs)
    out = Path(out_dir) if out_dir else cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.table())
    (out / "report.kv").write_text(report.key_values())
    return report


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic paired dataset"))
    g.add_argument("--count", type=int, help="number of pairs (default: data.count)")

    t = common(sub.add_parser("train", help="train from config"))
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=["cgan_l1", "l1_only"])
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--data", help="dataset directory (overrides [data])")

    i = common(sub.add_parser("infer", help="run the generator on images"))
    i.add_argument("--checkpoint")
    i.add_argument("inputs", nargs="+")

    e = common(sub.add_parser("eval", help="FID / IS / SSIM report"))
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset directory (overrides [data])")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gen-data":
            count = cfg.data.count if args.count is None else args.count
            root = cmd_gen_data(cfg, count, args.out)
            print(f"wrote {count} pairs to {root}")
        elif args.command == "train":
            final = cmd_train(cfg, args.resume, args.data)
            print(f"final checkpoint {final}")
        elif args.command == "infer":
            out = args.out or str(cfg.out_path / "infer")
            written = cmd_infer(cfg, args.checkpoint, args.inputs, out)
            print(f"wrote {len(written)} files to {out}")
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint, args.data, args.out)
            print(report.table(), end="")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageIOError, CheckpointError, ContractError, DimensionError,
            KeyError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
