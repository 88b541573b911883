"""``mi`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 data/format, 3 property failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .banks import BankSpec, ByteTokenizer, build_bank, load_bank, save_bank
from .budget import CacheSetup, budget_report, format_csv, format_table
from .errors import LatentBankError
from .harness import run_property_suite
from .model import Model, ModelConfig, generate, load_model, save_model, synth_model
from .plan import ROUTING_MODES, SteeringPlan
from .routing import RoutingGains
from .selector import SelectorConfig, calibrate, load_artifact, save_artifact

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROPERTY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise LatentBankError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise LatentBankError(f"{path}: expected a JSON object")
    v = doc.get("version", CONFIG_VERSION)
    if v != CONFIG_VERSION:
        raise LatentBankError(f"{path}: unsupported config version {v}")
    return doc


def open_model(spec) -> Model:
    """A MIW1 path, a JSON synth spec path, or an inline ``{"config": ..., "seed": ...}``."""
    if isinstance(spec, dict):
        return synth_model(ModelConfig.from_dict(spec["config"]), int(spec.get("seed", 0)))
    if str(spec).endswith(".json"):
        return open_model(_read_json(spec))
    return load_model(spec)


def parse_sites(text: str) -> list[tuple[int, int]]:
    """``"2:0,2:1,5:3"`` -> ``[(2, 0), (2, 1), (5, 3)]``."""
    sites = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            l, u = part.split(":")
            sites.append((int(l), int(u)))
        except ValueError as e:
            raise UsageError(f"bad site {part!r}; expected LAYER:UNIT") from e
    if not sites:
        raise UsageError("empty site list")
    return sites


def resolve_sites(arg: str, model: Model) -> list[tuple[int, int]]:
    if Path(arg).is_file():
        art = load_artifact(arg, model)
        return [(l, u) for l in art.layers for u in art.units[l]]
    return parse_sites(arg)


@dataclass
class RunConfig:
    model: object = None
    banks: list[str] = field(default_factory=list)
    artifact: str | None = None
    sites: str | None = None
    prompt: str = ""
    lambda_plus: float = 4.0
    lambda_minus: float = 0.0
    gamma: float = 1.0
    aux_gains: dict = field(default_factory=dict)
    mode: str = "mixture"
    sidebank_prompt_score: float = 0.0
    steps: int = 16
    trace: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = {k: v for k, v in d.items() if k != "version"}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise LatentBankError(f"unknown run-config fields: {sorted(unknown)}")
        return cls(**d)

    def validate(self):
        if self.mode not in ROUTING_MODES:
            raise UsageError(f"routing mode must be one of {ROUTING_MODES}")
        if self.model is None:
            raise UsageError("no model given")
        for p in self.banks + ([self.artifact] if self.artifact else []):
            if not Path(p).is_file():
                raise FileNotFoundError(p)


def build_plan(cfg: RunConfig, model: Model) -> SteeringPlan | None:
    banks = [load_bank(p, model) for p in cfg.banks]
    if not banks:
        return None
    gains = RoutingGains(cfg.lambda_plus, cfg.lambda_minus, cfg.gamma, {}, dict(cfg.aux_gains))
    extra = dict(sidebank_prompt_score=cfg.sidebank_prompt_score)
    if cfg.artifact:
        return SteeringPlan.from_artifact(load_artifact(cfg.artifact, model), banks, gains, cfg.mode, **extra)
    if cfg.sites:
        sites = parse_sites(cfg.sites)
    else:
        common = set(banks[0].sites).intersection(*(b.sites for b in banks[1:]))
        sites = sorted(common)
    by_layer: dict[int, list[int]] = {}
    for l, u in sites:
        by_layer.setdefault(l, []).append(u)
    return SteeringPlan({l: tuple(us) for l, us in by_layer.items()}, banks, gains, cfg.mode, **extra)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_model(args) -> int:
    doc = _read_json(args.config)
    model = synth_model(ModelConfig.from_dict(doc.get("config", doc)), args.seed if args.seed is not None
                        else int(doc.get("seed", 0)))
    save_model(model, args.out)
    print(f"wrote {args.out} fingerprint={model.fingerprint}")
    return EXIT_OK


def cmd_build_bank(args) -> int:
    model = open_model(args.model)
    spec = BankSpec.from_file(args.spec)
    bank = build_bank(model, spec, resolve_sites(args.sites, model))
    save_bank(bank, args.out)
    print(f"wrote {args.out} bank={bank.bank_id} role={bank.role} slots={bank.slot_count} sites={len(bank.sites)}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = open_model(args.model)
    target = load_bank(args.target_bank, model)
    ref = load_bank(args.ref_bank, model) if args.ref_bank else None
    tok = ByteTokenizer()
    lines = [l for l in Path(args.prompts).read_text().splitlines() if l.strip()]
    if not lines:
        raise LatentBankError(f"{args.prompts}: no prompts")
    prompts = [tok.encode(l)[0] for l in lines]
    base = SelectorConfig.from_dict(_read_json(args.config)) if args.config else SelectorConfig()
    overrides = {k: getattr(args, k) for k in ("k", "m", "xi", "chi", "aggregation", "gain_rule", "steps")
                 if getattr(args, k) is not None}
    config = SelectorConfig.from_dict({**base.to_dict(), **overrides})
    art = calibrate(model, prompts, target, ref, config)
    save_artifact(art, args.out)
    sel = ", ".join(f"{l}:{list(art.units[l])}" for l in art.layers)
    print(f"wrote {args.out} layers/units {sel}")
    return EXIT_OK


def cmd_steer(args) -> int:
    d = _read_json(args.config) if args.config else {}
    cfg = RunConfig.from_dict(d)
    for name in ("model", "artifact", "sites", "prompt", "lambda_plus", "lambda_minus", "gamma", "mode",
                 "sidebank_prompt_score", "steps"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.bank:
        cfg.banks = list(args.bank)
    if args.trace:
        cfg.trace = True
    cfg.validate()
    model = open_model(cfg.model)
    plan = build_plan(cfg, model)
    tok = ByteTokenizer()
    ids = tok.encode(cfg.prompt)[0]
    if not ids:
        raise UsageError("prompt is empty")
    recs = [] if cfg.trace else None
    tokens, _ = generate(model, ids, cfg.steps, plan, recs)
    if cfg.trace:
        for step, rec in enumerate(recs):
            for layer, head, diag in rec.diagnostics:
                print(diag.to_json(step=step, position=rec.position, layer=layer, head=head), file=sys.stderr)
    print(json.dumps({"tokens": tokens, "text": tok.decode_bytes(tokens).decode("utf-8", "replace"),
                      "steered": plan is not None}))
    return EXIT_OK


_BUDGET_KEYS = ("L", "L_ctrl", "T_prompt", "S_bank", "n_kv_heads", "head_dim", "bytes_per_element")


def _scenario_report(s: dict):
    try:
        L, L_ctrl, T, S = (int(s[k]) for k in ("L", "L_ctrl", "T_prompt", "S_bank"))
    except KeyError as e:
        raise LatentBankError(f"budget scenario missing field {e}") from e
    units = int(s.get("n_kv_heads", 1))
    d = int(s.get("head_dim", 1))
    b = int(s.get("bytes_per_element", 2))
    prompt = CacheSetup(L, units, d, T, b)
    bank = CacheSetup(L_ctrl, int(s.get("bank_units", units)), d, S, b)
    return budget_report(prompt, bank, str(s.get("name", "scenario")))


def cmd_budget(args) -> int:
    scenarios = []
    if args.config:
        doc = _read_json(args.config)
        scenarios = doc.get("scenarios", [doc])
    cli = {k: getattr(args, k) for k in _BUDGET_KEYS if getattr(args, k) is not None}
    if cli:
        scenarios = [{**s, **cli} for s in scenarios] if scenarios else [{"name": "cli", **cli}]
    if not scenarios:
        raise UsageError("budget needs --config or explicit --L/--L-ctrl/--T-prompt/--S-bank")
    reports = [_scenario_report(s) for s in scenarios]
    print(format_table(reports))
    print()
    print(format_csv(reports))
    return EXIT_OK


def cmd_check(args) -> int:
    report = run_property_suite(args.seed, tuple(args.sizes), args.instances)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_PROPERTY


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mi", description="Latent KV-bank steering toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth-model", help="write deterministic synthetic weights as a MIW1 file")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_model)

    s = sub.add_parser("build-bank", help="build a KV bank from a bank spec")
    s.add_argument("--model", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--sites", required=True, help="selector artifact path or LAYER:UNIT,...")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_bank)

    s = sub.add_parser("calibrate", help="trace calibration prompts and select sites")
    s.add_argument("--model", required=True)
    s.add_argument("--target-bank", required=True)
    s.add_argument("--ref-bank")
    s.add_argument("--prompts", required=True, help="text file, one prompt per line")
    s.add_argument("--config", help="selector config JSON")
    s.add_argument("--k", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--xi", type=float)
    s.add_argument("--chi", type=float)
    s.add_argument("--aggregation", choices=("sum", "mean"))
    s.add_argument("--gain-rule", choices=("constant", "normalized-score"))
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("steer", help="greedy generation with optional bank steering")
    s.add_argument("--config", help="run config JSON; flags override its fields")
    s.add_argument("--model")
    s.add_argument("--bank", action="append")
    s.add_argument("--artifact")
    s.add_argument("--sites")
    s.add_argument("--prompt")
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=ROUTING_MODES)
    s.add_argument("--lambda-plus", type=float)
    s.add_argument("--lambda-minus", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--sidebank-prompt-score", type=float)
    s.add_argument("--trace", action="store_true", help="stream routing diagnostics as JSON lines on stderr")
    s.set_defaults(func=cmd_steer)

    s = sub.add_parser("budget", help="KV-footprint comparison table")
    s.add_argument("--config")
    s.add_argument("--L", type=int)
    s.add_argument("--L-ctrl", dest="L_ctrl", type=int)
    s.add_argument("--T-prompt", dest="T_prompt", type=int)
    s.add_argument("--S-bank", dest="S_bank", type=int)
    s.add_argument("--n-kv-heads", dest="n_kv_heads", type=int)
    s.add_argument("--head-dim", dest="head_dim", type=int)
    s.add_argument("--bytes-per-element", dest="bytes_per_element", type=int)
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("check", help="run the randomized property suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sizes", type=int, nargs="*", default=[4, 8, 16])
    s.add_argument("--instances", type=int, default=200)
    s.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (LatentBankError, OSError, ValueError) as e:
        print(f"mi: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
