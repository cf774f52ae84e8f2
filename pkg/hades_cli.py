# =============================================================================
#           HADES TOOLKIT - COMMAND LINE
#           INIT-CONFIG, TRAIN, GENERATE, PASSKEY, ANALYZE, PARAMS, FLOPS,
#           GRADCHECK
# =============================================================================

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from analysis import ModelAnalyzer
from errors import ConfigError, GradcheckError, HadesError, MissingInputError
from harness import (
    DESK_CONTEXT_LENGTHS,
    LONG_CONTEXT_LENGTHS,
    TASKS,
    PasskeyEvaluator,
    PasskeySpec,
    build_passkey_prompt,
    byte_detokenize,
    byte_tokenize,
    make_task_stream,
)
from model import PRESETS, ModelConfig, config_hash, count_flops, count_params, load_checkpoint
from numerics import Rng
from trainer import TrainConfig, TrainingRunner, gradcheck_suite

logger = logging.getLogger("hades")

SEED_ENV = "HADES_SEED"
ANALYSES = ("spectrum", "response", "effrank", "cka", "barcode", "delta-hist")
DESK_TINY_TRAIN = {"seq_len": 8, "batch": 4}
# desk-copy runs copy 8 distinct symbols drawn from 16
DESK_COPY_RUN = {"copy_alphabet": 16, "copy_distinct": True}
DESK_COPY_TRAIN = {"seq_len": 16, "batch": 16, "steps": 5000, "warmup": 200}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: str = "copy"
    out_dir: str = "runs/hades"
    corpus_path: str = ""
    copy_alphabet: int = 0       # 0 = every symbol below the delimiter
    copy_distinct: bool = False

    def validate(self):
        self.model.validate()
        self.train.validate()
        if self.task not in TASKS:
            raise ConfigError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.task == "copy" and self.train.seq_len % 2:
            raise ConfigError("copy task needs an even seq_len")
        if not 0 <= self.copy_alphabet <= self.model.vocab - 1:
            raise ConfigError(f"copy_alphabet must lie in [0, {self.model.vocab - 1}], got {self.copy_alphabet}")
        alphabet = self.copy_alphabet or self.model.vocab - 1
        if self.task == "copy" and self.copy_distinct and alphabet < self.train.seq_len // 2:
            raise ConfigError(f"copy_distinct needs an alphabet of at least seq_len / 2, got {alphabet}")
        return self

    def to_flat(self):
        flat = {**self.model.to_dict(), **self.train.to_dict()}
        flat.update(task=self.task, out_dir=self.out_dir, corpus_path=self.corpus_path,
                    copy_alphabet=self.copy_alphabet, copy_distinct=self.copy_distinct)
        return flat

    @classmethod
    def from_flat(cls, data):
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        run_keys = {"task", "out_dir", "corpus_path", "copy_alphabet", "copy_distinct"}
        unknown = sorted(set(data) - model_keys - train_keys - run_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(
            model=ModelConfig(**{k: v for k, v in data.items() if k in model_keys}),
            train=TrainConfig(**{k: v for k, v in data.items() if k in train_keys}),
            **{k: v for k, v in data.items() if k in run_keys},
        ).validate()

    @classmethod
    def from_preset(cls, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
        if name == "desk-tiny":
            return cls(model=PRESETS[name], train=TrainConfig(**DESK_TINY_TRAIN)).validate()
        if name == "desk-copy":
            return cls(model=PRESETS[name], train=TrainConfig(**DESK_COPY_TRAIN), **DESK_COPY_RUN).validate()
        return cls(model=PRESETS[name], train=TrainConfig()).validate()


def load_run_config(path):
    if not os.path.exists(path):
        raise MissingInputError(f"config not found: {path}")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a flat JSON object")
    try:
        return RunConfig.from_flat(data)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def resolve_seed(flag_value, file_value):
    """--seed flag, then HADES_SEED, then the config file"""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{env}'") from e
    return int(file_value)


def model_config_from_args(args):
    if getattr(args, "config", None):
        return load_run_config(args.config).model
    return PRESETS[args.preset]


# --- Subcommands ---

def _json_scalar(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_json_mirror(path, data, provenance):
    """JSON copy of a report, stamped with the hash of what produced it"""
    data = {**data, "config_hash": config_hash(provenance)}
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_scalar)
    print(f"[OK] JSON written to {path}")


def cmd_init_config(args):
    run = RunConfig.from_preset(args.preset)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(run.to_flat(), f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"[OK] Wrote {args.preset} config to {args.out}")
    return 0


def cmd_train(args):
    run = load_run_config(args.config)
    run.train.seed = resolve_seed(args.seed, run.train.seed)
    if args.steps is not None:
        run.train.steps = args.steps
    if args.out_dir:
        run.out_dir = args.out_dir
    run.validate()
    stream = make_task_stream(run.task, run.model.vocab, run.train.batch, run.train.seq_len,
                              run.train.seed, corpus_path=run.corpus_path or None,
                              copy_alphabet=run.copy_alphabet or None, copy_distinct=run.copy_distinct)
    runner = TrainingRunner(run.model, run.train, stream, out_dir=run.out_dir,
                            run_dict=run.to_flat(), progress=not args.quiet)
    runner.run()
    return 0


def cmd_generate(args):
    model = load_checkpoint(args.ckpt)
    seed = resolve_seed(args.seed, 0)
    prompt = byte_tokenize(args.prompt)
    produced = model.generate(prompt, args.max_tokens, temperature=args.temperature, rng=Rng(seed))
    printable = [t for t in produced if t < 256]
    print(byte_detokenize(prompt + printable))
    return 0


def cmd_passkey(args):
    model = load_checkpoint(args.ckpt)
    lengths = LONG_CONTEXT_LENGTHS if args.paper_grid else (tuple(args.lengths) if args.lengths else DESK_CONTEXT_LENGTHS)
    spec = PasskeySpec(context_lengths=lengths, trials=args.trials, seed=resolve_seed(args.seed, 0))
    run_dict = {"model": model.cfg.to_dict(), "passkey": {"lengths": list(lengths), "trials": args.trials,
                                                          "seed": spec.seed}}
    evaluator = PasskeyEvaluator(model, spec, out_dir=args.out_dir, run_dict=run_dict)
    evaluator.run(progress=not args.quiet)
    evaluator.export_grid()
    return 0


def analysis_input(args):
    """Token ids plus region labels (passkey prompts) or None"""
    if args.input:
        if not os.path.exists(args.input):
            raise MissingInputError(f"input not found: {args.input}")
        with open(args.input, "rb") as f:
            ids = byte_tokenize(f.read())
        if not ids:
            raise ConfigError(f"input {args.input} is empty")
        return np.asarray(ids[:args.max_tokens]), None
    if args.passkey_length:
        prompt = build_passkey_prompt(PasskeySpec(), args.passkey_length, args.passkey_depth,
                                      Rng(resolve_seed(args.seed, 0)))
        return prompt.ids, prompt.labels
    raise ConfigError("analyze needs --input or --passkey-length")


def cmd_analyze(args):
    model = load_checkpoint(args.ckpt)
    ids, labels = analysis_input(args)
    run_hash = config_hash({"model": model.cfg.to_dict(), "input": args.input or "passkey",
                            "tokens": len(ids)})
    analyzer = ModelAnalyzer(model, ids, out_dir=args.out_dir, config_hash=run_hash, labels=labels)
    print(f"HADES ANALYSIS: {args.analysis}")
    print("=" * 70)
    if args.analysis == "spectrum":
        analyzer.run_spectrum(args.layer)
    elif args.analysis == "response":
        analyzer.run_response(args.layer)
    elif args.analysis == "effrank":
        analyzer.run_effrank()
    elif args.analysis == "cka":
        analyzer.run_cka()
    elif args.analysis == "barcode":
        analyzer.run_barcode(args.layer)
    else:
        analyzer.run_delta_hist()
    analyzer.export_summary_report()
    return 0


def cmd_params(args):
    cfg = model_config_from_args(args)
    report = count_params(cfg)
    print("PARAMETER COUNT")
    print("=" * 70)
    print(report.per_component.to_string(index=False))
    print("-" * 70)
    print(f"Mamba2 mixer per layer:        {report.mamba2_mixer_total:,}")
    print(f"HADES mixer per layer:         {report.mixer_total:,}")
    print(f"HADES router per layer:        {report.hades_added:,}")
    print(f"Reduction:                     {report.reduction:,}")
    print(f"Reduction (+2 per layer):      {report.reduction_with_plus2:,}")
    print(f"Baseline total:                {report.baseline_total:,}")
    print(f"Result:                        {report.result:,}")
    print(f"Result (+2 per layer):         {report.result_with_plus2:,}")
    if report.baseline_total_residual:
        print(f"[WARNING] stated baseline total differs from the mixer formula by "
              f"{report.baseline_total_residual:,}")
    print(f"Constructed total (HADES):     {report.constructed_total:,}")
    print(f"Constructed total (Mamba2):    {report.constructed_baseline_total:,}")
    if args.json:
        write_json_mirror(args.json, report.to_dict(), {"model": cfg.to_dict()})
    return 0


def cmd_flops(args):
    cfg = model_config_from_args(args)
    report = count_flops(cfg, args.seqlen)
    print(f"PER-TOKEN FLOPS (T={args.seqlen})")
    print("=" * 70)
    print(report.per_token.to_string(index=False))
    print("-" * 70)
    print("Decode stage:")
    print(report.decode_per_token.to_string(index=False))
    print("-" * 70)
    print("Routing overhead:")
    print(report.routing.to_string(index=False))
    print("-" * 70)
    print(f"Constants: {report.constants}")
    print(f"FLOPs ratio HADES / Mamba2:    {report.ratio:.4f}")
    print(f"Routing share of HADES total:  {report.routing_share:.4%}")
    if args.json:
        write_json_mirror(args.json, report.to_dict(), {"model": cfg.to_dict(), "seqlen": args.seqlen})
    return 0


def cmd_gradcheck(args):
    cfg = model_config_from_args(args)
    seed = resolve_seed(args.seed, 0)
    print(f"GRADIENT CHECK (seed {seed})")
    print("=" * 70)
    report = gradcheck_suite([seed], cfg=cfg, seq_len=args.seq_len, raise_on_failure=False)[0]
    if report.excluded:
        print(f"[WARNING] seed {seed} excluded ({report.reason}: margin {report.min_margin:.2e})")
        return 0
    print(f"Entries checked: {len(report.rows)}")
    print(f"Max relative error: {report.max_rel_error:.3e}")
    if not report.passed:
        worst = report.rows.sort_values("rel_error", ascending=False).head(5)
        print(worst.to_string(index=False))
        raise GradcheckError(f"max relative error {report.max_rel_error:.3e}")
    print("[OK] analytic gradients match central differences")
    return 0


# --- Parser ---

def build_parser():
    parser = argparse.ArgumentParser(prog="hades", description="HADES desk-scale toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a preset config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk-tiny", help="named run config")
    p.add_argument("--out", default="hades_config.json", help="config file to write")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train on a task stream")
    p.add_argument("--config", required=True, help="flat JSON run config")
    p.add_argument("--seed", type=int, help=f"overrides {SEED_ENV} and the file")
    p.add_argument("--steps", type=int, help="override the step count")
    p.add_argument("--out-dir", help="override the output directory")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode from a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--prompt", required=True, help="text prompt, byte-tokenized")
    p.add_argument("--max-tokens", type=int, default=32, help="tokens to generate")
    p.add_argument("--temperature", type=float, default=0.0, help="0 is greedy")
    p.add_argument("--seed", type=int, help=f"sampling seed, overrides {SEED_ENV}")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("passkey", help="passkey retrieval grid")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--paper-grid", action="store_true", help="1K-16K context lengths")
    p.add_argument("--lengths", type=int, nargs="+", help="custom context lengths")
    p.add_argument("--trials", type=int, default=10, help="trials per grid cell")
    p.add_argument("--seed", type=int, help=f"passkey seed, overrides {SEED_ENV}")
    p.add_argument("--out-dir", default=".", help="where passkey_grid.csv goes")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_passkey)

    p = sub.add_parser("analyze", help="spectral and routing diagnostics")
    p.add_argument("analysis", choices=ANALYSES, help="diagnostic to run")
    p.add_argument("--ckpt", required=True, help="checkpoint to analyze")
    p.add_argument("--input", help="text file, byte-tokenized")
    p.add_argument("--max-tokens", type=int, default=512, help="truncate the input to this many tokens")
    p.add_argument("--passkey-length", type=int, help="analyze a passkey prompt of this length")
    p.add_argument("--passkey-depth", type=int, default=50, help="passkey depth in percent")
    p.add_argument("--layer", type=int, default=0, help="layer for per-layer diagnostics")
    p.add_argument("--seed", type=int, help=f"passkey prompt seed, overrides {SEED_ENV}")
    p.add_argument("--out-dir", default=".", help="where the CSVs and summary go")
    p.set_defaults(func=cmd_analyze)

    for name, func, help_text in (("params", cmd_params, "parameter counts"),
                                  ("flops", cmd_flops, "per-token FLOPs")):
        p = sub.add_parser(name, help=help_text)
        group = p.add_mutually_exclusive_group()
        group.add_argument("--config", help="flat JSON run config")
        group.add_argument("--preset", choices=sorted(PRESETS), default="paper-370m", help="named model config")
        p.add_argument("--json", help="write the JSON mirror here")
        if name == "flops":
            p.add_argument("--seqlen", type=int, default=2048, help="sequence length T")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, help=f"model and batch seed, overrides {SEED_ENV}")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config", help="flat JSON run config")
    group.add_argument("--preset", choices=sorted(PRESETS), default="desk-tiny", help="named model config")
    p.add_argument("--seq-len", type=int, default=8, help="tokens in the checked sequence")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.debug("running %s", args.command)
    try:
        return args.func(args)
    except HadesError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return MissingInputError.exit_code
    except ValueError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
