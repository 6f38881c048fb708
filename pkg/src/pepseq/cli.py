"""Command-line pipeline: simulate → train → finetune → decode → eval.

Configuration lives in an INI file with [model], [training], [simulation],
[decoding], and [paths] sections; every key can be overridden on the
command line with --set section.key=value, and every command records the
SHA-256 of its effective configuration in a JSON manifest next to its
outputs. A seed is mandatory (--seed or training.seed) and every command
is deterministic given (config, seed).

Exit codes: 0 success, 1 usage/config problems, 2 data problems (missing
or malformed files, id mismatches, vocabulary clashes), 3 numeric failure
during training.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .decoding import beam_search_at, greedy_at_decode, nat_pmc_decode
from .metrics import corpus_eval, precision_coverage
from .mgf import MGFParseError, parse_mgf, write_mgf
from .network import Model, ModelConfig
from .optim import OptimizerState
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .spectra import (
    AminoAcidTable,
    NoiseConfig,
    Peptide,
    Spectrum,
    VocabularyError,
    random_peptide,
    simulate_spectrum,
)
from .training import (
    AnnealSchedule,
    FeatureCache,
    LRConfig,
    TrainState,
    finetune_stage2_step,
    train_stage1_step,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DECODERS = ("at-greedy", "at-beam", "nat-pmc")

DEFAULTS: dict[str, dict[str, str]] = {
    "model": {
        "d": "64",
        "heads": "2",
        "hidden": "128",
        "enc_layers": "2",
        "at_layers": "2",
        "nat_layers": "2",
        "t_max": "24",
        "paired_encoding": "false",
    },
    "training": {
        "seed": "",
        "stage1_steps": "2000",
        "finetune_epochs": "200",
        "base_lr": "5e-4",
        "finetune_lr": "1e-4",
        "warmup_steps": "100",
        "batch_size": "10",
        "checkpoint_every": "500",
    },
    "simulation": {
        "n_spectra": "100",
        "min_len": "5",
        "max_len": "12",
        "mz_sigma": "0.0",
        "drop_prob": "0.0",
        "n_noise_peaks": "0",
    },
    "decoding": {
        "decoder": "at-greedy",
        "beam_width": "5",
        "pmc_tolerance": "0.1",
        "pmc_bin": "0.001",
        "max_len": "0",  # 0 means t_max - 2
    },
    "paths": {
        "corpus": "",
        "checkpoint": "",
        "resume": "",
        "mgf": "",
        "predictions": "",
        "truth": "",
    },
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class RunConfig:
    """Merged defaults + INI file + --set overrides, plus the seed."""

    def __init__(self, parser: configparser.ConfigParser, seed: int):
        self._cp = parser
        self.seed = seed

    @classmethod
    def load(cls, config_path: str | None, sets: list[str], seed_flag: int | None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise UsageError(f"config file not found: {path}")
            try:
                cp.read_string(path.read_text(), source=str(path))
            except configparser.Error as e:
                raise UsageError(f"bad config file: {e}") from e
            cls._check_known(cp, f"config file {path}")
        for item in sets:
            key, sep, value = item.partition("=")
            section, dot, option = key.partition(".")
            if not sep or not dot or not section or not option:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            if section not in DEFAULTS or option not in DEFAULTS[section]:
                raise UsageError(f"unknown config key {section}.{option}")
            cp[section][option] = value
        cls._check_known(cp, "config")
        seed_text = cp["training"]["seed"]
        if seed_flag is not None:
            seed = seed_flag
        elif seed_text:
            try:
                seed = int(seed_text)
            except ValueError as e:
                raise UsageError(f"training.seed must be an integer, got {seed_text!r}") from e
        else:
            raise UsageError("a seed is required (--seed N or training.seed in the config)")
        cp["training"]["seed"] = str(seed)
        return cls(cp, seed)

    @staticmethod
    def _check_known(cp: configparser.ConfigParser, source: str) -> None:
        for section in cp.sections():
            if section not in DEFAULTS:
                raise UsageError(f"{source}: unknown section [{section}]")
            for option in cp[section]:
                if option not in DEFAULTS[section]:
                    raise UsageError(f"{source}: unknown key {section}.{option}")

    def _get(self, kind, section: str, option: str):
        getter = {int: self._cp.getint, float: self._cp.getfloat, bool: self._cp.getboolean, str: self._cp.get}[kind]
        try:
            return getter(section, option)
        except ValueError as e:
            raise UsageError(
                f"bad value for {section}.{option}: {self._cp.get(section, option)!r}"
            ) from e

    def getint(self, section, option):
        return self._get(int, section, option)

    def getfloat(self, section, option):
        return self._get(float, section, option)

    def getbool(self, section, option):
        return self._get(bool, section, option)

    def get(self, section, option):
        return self._get(str, section, option)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                d=self.getint("model", "d"),
                heads=self.getint("model", "heads"),
                hidden=self.getint("model", "hidden"),
                enc_layers=self.getint("model", "enc_layers"),
                at_layers=self.getint("model", "at_layers"),
                nat_layers=self.getint("model", "nat_layers"),
                t_max=self.getint("model", "t_max"),
                paired_encoding=self.getbool("model", "paired_encoding"),
            )
        except ValueError as e:
            raise UsageError(f"bad model config: {e}") from e

    def canonical(self) -> str:
        lines = []
        for section in sorted(DEFAULTS):
            for option in sorted(DEFAULTS[section]):
                lines.append(f"{section}.{option}={self._cp.get(section, option)}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _require_path(cfg: RunConfig, option: str, what: str) -> Path:
    text = cfg.get("paths", option)
    if not text:
        raise UsageError(f"paths.{option} is required for this command ({what})")
    return Path(text)


def _read_corpus(path: Path, table: AminoAcidTable, require_truth: bool) -> list[Spectrum]:
    if not path.is_file():
        raise DataError(f"spectra file not found: {path}")
    spectra = parse_mgf(path.read_text(), table=table)
    if not spectra:
        raise DataError(f"no spectra in {path}")
    if require_truth:
        missing = [s.spectrum_id for s in spectra if s.truth is None]
        if missing:
            raise DataError(
                f"{path}: spectra without SEQ annotations: {', '.join(missing[:5])}"
                + ("…" if len(missing) > 5 else "")
            )
    return spectra


def _write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict) -> None:
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _batches(n: int, size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled each full pass."""
    while True:
        order = rng.permutation(n)
        for k in range(0, n, size):
            yield [int(i) for i in order[k : k + size]]


def _load_model(path: Path, table: AminoAcidTable) -> tuple[Model, dict]:
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    store, blob = load_checkpoint(str(path))
    if blob.get("vocabulary") != table.to_dict():
        raise DataError(
            f"checkpoint {path} was trained with a different residue vocabulary"
        )
    return Model.from_checkpoint_blob(store, blob), blob


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    table = AminoAcidTable()
    n = cfg.getint("simulation", "n_spectra")
    min_len = cfg.getint("simulation", "min_len")
    max_len = cfg.getint("simulation", "max_len")
    try:
        noise = NoiseConfig(
            mz_sigma=cfg.getfloat("simulation", "mz_sigma"),
            drop_prob=cfg.getfloat("simulation", "drop_prob"),
            n_noise_peaks=cfg.getint("simulation", "n_noise_peaks"),
        )
    except ValueError as e:
        raise UsageError(f"bad simulation config: {e}") from e
    if n < 1:
        raise UsageError(f"simulation.n_spectra must be positive, got {n}")
    t_max = cfg.getint("model", "t_max")
    if max_len > t_max - 2:
        raise UsageError(
            f"simulation.max_len {max_len} exceeds t_max - 2 = {t_max - 2}; "
            "such peptides could not be trained on"
        )
    rng = np.random.default_rng(cfg.seed)
    spectra = []
    for i in range(n):
        pep = random_peptide(rng, min_len, max_len, table)
        spectra.append(
            simulate_spectrum(
                pep,
                seed=int(rng.integers(1 << 30)),
                noise=noise,
                spectrum_id=f"synth-{i:05d}",
                table=table,
            )
        )
    (out / "spectra.mgf").write_text(write_mgf(spectra))
    _write_manifest(out, "simulate", cfg, {
        "n_spectra": n,
        "outputs": {"mgf": "spectra.mgf"},
    })
    print(f"wrote {n} spectra to {out / 'spectra.mgf'}")
    return EXIT_OK


def _metrics_writer(path: Path):
    fh = path.open("w", newline="")
    writer = csv.writer(fh)
    writer.writerow(["step", "stage", "at_loss", "nat_loss", "lambda", "lr"])
    return fh, writer


def _write_metrics_row(writer, row: dict) -> None:
    writer.writerow(
        [row["step"], row["stage"], row["at_loss"], row["nat_loss"], row["lambda"], row["lr"]]
    )


def cmd_train(cfg: RunConfig, out: Path) -> int:
    table = AminoAcidTable()
    corpus = _read_corpus(_require_path(cfg, "corpus", "training spectra"), table, require_truth=True)
    total = cfg.getint("training", "stage1_steps")
    batch_size = cfg.getint("training", "batch_size")
    every = cfg.getint("training", "checkpoint_every")
    if total < 1 or batch_size < 1 or every < 1:
        raise UsageError("stage1_steps, batch_size, and checkpoint_every must be positive")

    resume_text = cfg.get("paths", "resume")
    if resume_text:
        model, blob = _load_model(Path(resume_text), table)
        if model.cfg != cfg.model_config():
            raise DataError("resume checkpoint's model shape differs from the config")
        start_step = int(blob.get("train", {}).get("next_step", 0))
    else:
        model = Model.build(cfg.model_config(), table, seed=cfg.seed)
        start_step = 0
    if start_step > total:
        raise DataError(
            f"resume checkpoint is already past stage1_steps ({start_step} > {total})"
        )

    try:
        lr_cfg = LRConfig(
            base_lr=cfg.getfloat("training", "base_lr"),
            warmup_steps=cfg.getint("training", "warmup_steps"),
            total_steps=total,
        )
    except ValueError as e:
        raise UsageError(f"bad training config: {e}") from e
    state = TrainState(
        model,
        OptimizerState(lr=lr_cfg.base_lr),
        AnnealSchedule(total),
        lr_cfg,
        step=start_step,
    )
    gen = _batches(len(corpus), batch_size, np.random.default_rng([cfg.seed, 1]))
    ckpt_path = out / "checkpoint.bin"

    def save(next_step: int) -> None:
        save_checkpoint(str(ckpt_path), model.store, model.metadata({"train": {"next_step": next_step}}))

    # On a numeric abort the exception propagates (exit code 3) and the
    # last periodic checkpoint, if any, stays on disk untouched.
    fh, writer = _metrics_writer(out / "metrics.csv")
    try:
        for i in range(start_step, total):
            batch = [corpus[j] for j in next(gen)]
            row = train_stage1_step(model, batch, state)
            _write_metrics_row(writer, row)
            if (i + 1) % every == 0:
                save(i + 1)
    finally:
        fh.close()
    save(total)
    _write_manifest(out, "train", cfg, {
        "steps": total - start_step,
        "resumed_from_step": start_step,
        "outputs": {"checkpoint": "checkpoint.bin", "metrics": "metrics.csv"},
    })
    print(f"trained {total - start_step} steps; checkpoint at {ckpt_path}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, out: Path) -> int:
    table = AminoAcidTable()
    corpus = _read_corpus(_require_path(cfg, "corpus", "training spectra"), table, require_truth=True)
    ckpt_in = _require_path(cfg, "checkpoint", "stage-1 checkpoint")
    epochs = cfg.getint("training", "finetune_epochs")
    batch_size = cfg.getint("training", "batch_size")
    if epochs < 0 or batch_size < 1:
        raise UsageError("finetune_epochs must be >= 0 and batch_size positive")

    model, blob = _load_model(ckpt_in, table)
    ckpt_out = out / "checkpoint.bin"
    if epochs == 0:
        # Nothing to do: pass the checkpoint through byte-identically.
        save_checkpoint(str(ckpt_out), model.store, blob)
        _write_manifest(out, "finetune", cfg, {
            "epochs": 0,
            "frozen_partitions_unchanged": True,
            "outputs": {"checkpoint": "checkpoint.bin", "metrics": "metrics.csv"},
        })
        (out / "metrics.csv").write_text("step,stage,at_loss,nat_loss,lambda,lr\n")
        print("0 fine-tune epochs requested; checkpoint passed through")
        return EXIT_OK

    enc_before = model.store.snapshot("enc")
    nat_before = model.store.snapshot("nat")
    model.store.freeze("enc")
    model.store.freeze("nat")
    state = TrainState(
        model,
        OptimizerState(lr=cfg.getfloat("training", "finetune_lr")),
        AnnealSchedule(1),
        LRConfig(),
    )
    cache = FeatureCache(model)
    gen = _batches(len(corpus), batch_size, np.random.default_rng([cfg.seed, 2]))
    steps_per_epoch = (len(corpus) + batch_size - 1) // batch_size

    first_loss = last_loss = None
    fh, writer = _metrics_writer(out / "metrics.csv")
    try:
        for _ in range(epochs):
            for _ in range(steps_per_epoch):
                batch = [corpus[j] for j in next(gen)]
                row = finetune_stage2_step(model, batch, state, cache)
                _write_metrics_row(writer, row)
                last_loss = row["at_loss"]
                if first_loss is None:
                    first_loss = row["at_loss"]
    finally:
        fh.close()

    unchanged = all(
        np.array_equal(enc_before[k], v.values) for k, v in model.store.partition_items("enc")
    ) and all(
        np.array_equal(nat_before[k], v.values) for k, v in model.store.partition_items("nat")
    )
    save_checkpoint(
        str(ckpt_out),
        model.store,
        model.metadata({"train": blob.get("train", {}), "finetune": {"epochs": epochs}}),
    )
    _write_manifest(out, "finetune", cfg, {
        "epochs": epochs,
        "frozen_partitions_unchanged": unchanged,
        "at_loss_first": first_loss,
        "at_loss_last": last_loss,
        "outputs": {"checkpoint": "checkpoint.bin", "metrics": "metrics.csv"},
    })
    if not unchanged:
        raise DataError("frozen partitions drifted during fine-tuning")
    print(f"fine-tuned {epochs} epochs; checkpoint at {ckpt_out}")
    return EXIT_OK


def cmd_decode(cfg: RunConfig, out: Path) -> int:
    decoder = cfg.get("decoding", "decoder")
    if decoder not in DECODERS:
        raise UsageError(f"decoding.decoder must be one of {', '.join(DECODERS)}; got {decoder!r}")
    table = AminoAcidTable()
    spectra = _read_corpus(_require_path(cfg, "mgf", "spectra to decode"), table, require_truth=False)
    model, _ = _load_model(_require_path(cfg, "checkpoint", "model checkpoint"), table)
    max_len = cfg.getint("decoding", "max_len") or model.cfg.t_max - 2
    beam_width = cfg.getint("decoding", "beam_width")
    tol = cfg.getfloat("decoding", "pmc_tolerance")
    bin_width = cfg.getfloat("decoding", "pmc_bin")

    rows = []
    for s in spectra:
        if decoder == "at-greedy":
            r = greedy_at_decode(model, s, max_len=max_len)
            rows.append((s.spectrum_id, str(r.peptide), r.confidence, decoder, r.finished))
        elif decoder == "at-beam":
            r = beam_search_at(model, s, width=beam_width, max_len=max_len)[0]
            rows.append((s.spectrum_id, str(r.peptide), r.confidence, decoder, r.finished))
        else:
            result, conf = nat_pmc_decode(model, s, tolerance=tol, bin_width=bin_width)
            rows.append((s.spectrum_id, str(result.peptide), conf, decoder, result.feasible))

    pred_path = out / "predictions.csv"
    with pred_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spectrum_id", "predicted_sequence", "confidence", "decoder", "feasible_flag"])
        for sid, seq, conf, dec, flag in rows:
            writer.writerow([sid, seq, conf, dec, str(bool(flag)).lower()])
    _write_manifest(out, "decode", cfg, {
        "decoder": decoder,
        "n_spectra": len(rows),
        "outputs": {"predictions": "predictions.csv"},
    })
    print(f"decoded {len(rows)} spectra with {decoder}; predictions at {pred_path}")
    return EXIT_OK


def _read_predictions(path: Path) -> list[tuple[str, Peptide, float]]:
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"spectrum_id", "predicted_sequence", "confidence"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise DataError(
                f"{path}: predictions CSV must have columns {sorted(required)}"
            )
        preds = []
        for line, row in enumerate(reader, start=2):
            try:
                pep = Peptide.from_string(row["predicted_sequence"] or "")
                conf = float(row["confidence"])
            except (VocabularyError, ValueError) as e:
                raise DataError(f"{path} line {line}: {e}") from e
            preds.append((row["spectrum_id"], pep, conf))
    return preds


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    table = AminoAcidTable()
    preds = _read_predictions(_require_path(cfg, "predictions", "decoder output"))
    truth_spectra = _read_corpus(_require_path(cfg, "truth", "annotated spectra"), table, require_truth=True)
    truths = {s.spectrum_id: s.truth for s in truth_spectra}
    try:
        report = corpus_eval(preds, truths, table)
    except ValueError as e:
        raise DataError(str(e)) from e
    curve = precision_coverage(report)

    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["aa_precision", "peptide_recall"])
        writer.writerow([report.aa_precision, report.peptide_recall])
    with (out / "per_spectrum.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["spectrum_id", "confidence", "peptide_correct", "matched_aa", "predicted_aa", "truth_aa"]
        )
        for r in report.rows:
            writer.writerow(
                [r.spectrum_id, r.confidence, str(r.peptide_correct).lower(),
                 r.matched_aa, r.predicted_aa, r.truth_aa]
            )
    with (out / "curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coverage", "value"])
        for x, y in curve.points:
            writer.writerow([x, y])
    _write_manifest(out, "eval", cfg, {
        "aa_precision": report.aa_precision,
        "peptide_recall": report.peptide_recall,
        "n_spectra": len(report.rows),
        "outputs": {
            "summary": "summary.csv",
            "per_spectrum": "per_spectrum.csv",
            "curve": "curve.csv",
        },
    })
    print(
        f"aa_precision={report.aa_precision:.4f} peptide_recall={report.peptide_recall:.4f} "
        f"over {len(report.rows)} spectra"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(message)


def _add_shared(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--seed", type=int, help="run seed (overrides training.seed)")
    sub.add_argument("--out", required=True, help="output directory (created if missing)")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value; repeatable",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="pepseq", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="generate an annotated synthetic corpus")
    _add_shared(p)
    p.add_argument("--n", type=int, help="number of spectra (simulation.n_spectra)")

    p = subs.add_parser("train", help="stage-1 joint training from scratch")
    _add_shared(p)
    p.add_argument("--corpus", help="annotated MGF (paths.corpus)")
    p.add_argument("--resume", help="continue from this checkpoint (paths.resume)")

    p = subs.add_parser("finetune", help="stage-2 fine-tuning of the sequential decoder")
    _add_shared(p)
    p.add_argument("--corpus", help="annotated MGF (paths.corpus)")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (paths.checkpoint)")

    p = subs.add_parser("decode", help="predict peptides for an MGF")
    _add_shared(p)
    p.add_argument("--mgf", help="spectra to decode (paths.mgf)")
    p.add_argument("--checkpoint", help="model checkpoint (paths.checkpoint)")
    p.add_argument("--decoder", choices=DECODERS, help="decoding.decoder")
    p.add_argument("--beam", type=int, help="decoding.beam_width")
    p.add_argument("--tol", type=float, help="decoding.pmc_tolerance")

    p = subs.add_parser("eval", help="score predictions against annotated truth")
    _add_shared(p)
    p.add_argument("--predictions", help="decoder output CSV (paths.predictions)")
    p.add_argument("--truth", help="annotated MGF (paths.truth)")
    return parser


_FLAG_TO_KEY = {
    "n": ("simulation", "n_spectra"),
    "corpus": ("paths", "corpus"),
    "resume": ("paths", "resume"),
    "checkpoint": ("paths", "checkpoint"),
    "mgf": ("paths", "mgf"),
    "decoder": ("decoding", "decoder"),
    "beam": ("decoding", "beam_width"),
    "tol": ("decoding", "pmc_tolerance"),
    "predictions": ("paths", "predictions"),
    "truth": ("paths", "truth"),
}

_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sets = list(args.set)
        for flag, (section, option) in _FLAG_TO_KEY.items():
            value = getattr(args, flag, None)
            if value is not None:
                sets.append(f"{section}.{option}={value}")
        cfg = RunConfig.load(args.config, sets, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MGFParseError, CheckpointError, VocabularyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
