"""Command-line entry point: ``cama generate|train|questions|monitor|eval|ablation``.

All commands share one output root::

    OUT/data/      train.csv, test.csv, schema.json, drift.json, provenance.json
    OUT/model/     model.json
    OUT/reports/   <method>-<run_id>.json and .md
    OUT/memory/    episodic.jsonl
    OUT/eval/      banks, answer sheets, metrics tables
    OUT/logs/      one JSON run log per run

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 data error, 4 LLM backend error. Failures also print one JSON object
``{"error": ..., "exit_code": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .agent import AgentError, MonitoringReport, prepare, run
from .baselines import STRATEGIES, run_baseline
from .evaluation import (
    DEFAULT_BANK_SIZE,
    EvalError,
    EvalMetrics,
    QuestionBank,
    aggregate,
    generate_questions,
    ground_truth_report,
    judge,
    metrics_table,
    pm,
    reference_bank,
    score,
)
from .llm import ENV_API_KEY, HTTPBackend, LLMError, RecordingLLM, ScriptedBackend
from .memory import AgentConfig, EpisodicMemory, MemoryStoreError, ProceduralMemory, SemanticMemory, ToolConfig
from .model import ModelError, load_model, save_model, train
from .tabular import (
    BUILTIN_IDS,
    SchemaError,
    builtin_schema,
    default_drift,
    generate,
    load_csv,
    load_drift,
    load_schema,
    save_csv,
    save_drift,
    save_schema,
)

logger = logging.getLogger("cama")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3, 4
METHODS = ("cama", "standard", "cot", "reflection", "react", "self-discover", "plan-execute")
ABLATIONS = (
    ("Full Pipeline", {}),
    ("w/o Refactor", {"refactor": False}),
    ("w/o Break Down", {"breakdown": False}),
    ("w/o Compile", {"compile": False}),
)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce one command. Embedded in every artifact it produces."""

    command: str
    out: str = "out"
    dataset: str | None = None
    schema: str | None = None
    data: str | None = None
    test: str | None = None
    model: str | None = None
    drift: str | None = None
    n: int = 1000
    seed: int = 0
    epochs: int = 500
    learning_rate: float = 0.5
    method: str = "cama"
    methods: list[str] = field(default_factory=lambda: ["cama"])
    refactor: bool = True
    breakdown: bool = True
    compile: bool = True
    parallelism: int = 4
    sample_size: int = 100
    alpha: float = 0.05
    backend: str = "scripted"
    script: str | None = None
    base_url: str | None = None
    llm_model: str = "default"
    temperature: float = 0.0
    runs: int = 1
    bank: str | None = None
    questions: int = DEFAULT_BANK_SIZE
    manual: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    # paths under the output root -------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.out)

    def subdir(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def data_dir(self) -> Path:
        return Path(self.data) if self.data else self.root / "data"

    @property
    def model_path(self) -> Path:
        return Path(self.model) if self.model else self.root / "model" / "model.json"

    @property
    def episodic_path(self) -> Path:
        return self.root / "memory" / "episodic.jsonl"

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.command == "generate" and self.dataset is None and self.schema is None:
            raise ConfigError("generate needs --dataset or --schema")
        if self.dataset is not None and self.dataset not in BUILTIN_IDS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; valid ids: {', '.join(BUILTIN_IDS)}")
        for name in ("n", "epochs", "parallelism", "sample_size", "runs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.questions < 0:
            raise ConfigError("questions must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.backend not in ("scripted", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}; valid: scripted, http")
        bad = [m for m in [self.method, *self.methods] if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method {bad[0]!r}; valid: {', '.join(METHODS)}")
        for name in ("schema", "test", "model", "drift", "script", "bank"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise DataError(f"--{name} file not found: {value}")
        if self.data is not None and not Path(self.data).is_dir():
            raise DataError(f"--data directory not found: {self.data}")
        return self


# ----------------------------------------------------------------- helpers


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def default_script_path() -> Path:
    return Path(str(resources.files("cama") / "data" / "offline_rules.json"))


def shipped_bank_path(dataset_id: str) -> Path:
    return Path(str(resources.files("cama") / "data" / "banks" / f"{dataset_id}.json"))


def make_backend(cfg: RunConfig):
    if cfg.backend == "scripted":
        return ScriptedBackend.from_file(cfg.script or default_script_path())
    if cfg.base_url:
        return HTTPBackend(cfg.base_url, os.environ.get(ENV_API_KEY), cfg.llm_model)
    backend = HTTPBackend.from_env()
    if cfg.llm_model != "default":
        backend.model = cfg.llm_model
    return backend


def _load_schema(cfg: RunConfig):
    path = cfg.data_dir / "schema.json"
    if cfg.schema:
        return load_schema(cfg.schema)
    if path.is_file():
        return load_schema(path)
    if cfg.dataset:
        return builtin_schema(cfg.dataset)
    raise DataError(f"no schema: {path} is missing and neither --schema nor --dataset was given")


def _load_data(cfg: RunConfig, which: str):
    schema = _load_schema(cfg)
    path = Path(cfg.test) if (which == "test" and cfg.test) else cfg.data_dir / f"{which}.csv"
    if not path.is_file():
        raise DataError(f"{which} data not found: {path} (run 'cama generate' first)")
    return load_csv(path, schema)


def _semantic(cfg: RunConfig) -> SemanticMemory:
    train_set = _load_data(cfg, "train")
    if not cfg.model_path.is_file():
        raise DataError(f"model not found: {cfg.model_path} (run 'cama train' first)")
    model = load_model(cfg.model_path)
    if model.schema != train_set.schema:
        raise DataError("model schema does not match the training data schema")
    return SemanticMemory(train_set, model, ToolConfig(alpha=cfg.alpha, sample_size=cfg.sample_size))


def _procedural(cfg: RunConfig, **overrides: Any) -> ProceduralMemory:
    agent_cfg = AgentConfig(
        parallelism=cfg.parallelism, refactor=cfg.refactor, breakdown=cfg.breakdown, compile=cfg.compile,
        backend=cfg.backend, model=cfg.llm_model, temperature=cfg.temperature,
    )
    pm_ = ProceduralMemory.load(config=agent_cfg)
    return pm_.with_config(**overrides) if overrides else pm_


def _monitor_once(cfg: RunConfig, method: str, semantic: SemanticMemory, episodic: EpisodicMemory,
                  backend, procedural: ProceduralMemory | None = None) -> tuple[MonitoringReport, list[dict]]:
    test_set = _load_data(cfg, "test")
    procedural = procedural or _procedural(cfg)
    log: list[dict[str, Any]] = []
    if method == "cama":
        report = run(semantic, episodic, test_set, procedural, backend, seed=cfg.seed, config=cfg.to_dict(),
                     run_log=log)
    else:
        wm = prepare(semantic, episodic, test_set, procedural, cfg.seed)
        llm = RecordingLLM(backend, procedural.config.model, procedural.config.temperature)
        report = run_baseline(method, wm, llm, procedural, config=cfg.to_dict(), n_prior=len(episodic))
        log = [{"stage": "baseline", "strategy": report.metadata["strategy"]}]
    return report, log


def _save_report(cfg: RunConfig, report: MonitoringReport, log: list[dict], suffix: str = "") -> Path:
    stem = f"{report.method}-{report.run_id}{suffix}"
    path = cfg.subdir("reports") / f"{stem}.json"
    report.save(path)
    (path.with_suffix(".md")).write_text(report.render(), encoding="utf-8")
    _write_json(cfg.subdir("logs") / f"{stem}.json",
                {"run_id": report.run_id, "config": cfg.to_dict(), "events": log, "metrics": report.metrics})
    return path


def _load_bank(cfg: RunConfig, semantic: SemanticMemory) -> QuestionBank:
    if cfg.bank:
        return QuestionBank.load(cfg.bank)
    local = cfg.root / "eval" / "bank.json"
    if local.is_file():
        return QuestionBank.load(local)
    test_set = _load_data(cfg, "test")
    wm = prepare(semantic, EpisodicMemory(), test_set, _procedural(cfg), cfg.seed)
    return reference_bank(wm, cfg.questions, seed=0)


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig) -> int:
    schema = load_schema(cfg.schema) if cfg.schema else builtin_schema(cfg.dataset)
    if cfg.drift:
        drift = load_drift(cfg.drift)
    elif cfg.dataset:
        drift = default_drift(cfg.dataset)
    else:
        raise ConfigError("--drift is required with a custom --schema")
    drift.validate(schema)
    out = cfg.data_dir
    out.mkdir(parents=True, exist_ok=True)
    train_set = generate(schema, cfg.n, cfg.seed)
    test_set = generate(schema, cfg.n, cfg.seed + 1, drift)
    save_csv(train_set, out / "train.csv")
    save_csv(test_set, out / "test.csv")
    save_schema(schema, out / "schema.json")
    save_drift(drift, out / "drift.json")
    _write_json(out / "provenance.json", {"config": cfg.to_dict(), "train": dict(train_set.provenance),
                                          "test": dict(test_set.provenance)})
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'} ({cfg.n} rows each)")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    train_set = _load_data(cfg, "train")
    model = train(train_set, cfg.epochs, cfg.learning_rate, cfg.seed)
    model = type(model)(model.schema, model.weights, model.bias, {**model.metadata, "config": cfg.to_dict()})
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cfg.model_path)
    print(f"wrote {cfg.model_path} (train log-loss {model.metadata['final_train_log_loss']:.4f})")
    return EXIT_OK


def cmd_questions(cfg: RunConfig) -> int:
    semantic = _semantic(cfg)
    test_set = _load_data(cfg, "test")
    procedural = _procedural(cfg)
    wm = prepare(semantic, EpisodicMemory(), test_set, procedural, cfg.seed)
    eval_dir = cfg.subdir("eval")
    if cfg.manual:
        bank = reference_bank(wm, cfg.questions, seed=0)
    else:
        llm = RecordingLLM(make_backend(cfg), cfg.llm_model, cfg.temperature)
        truth = ground_truth_report(wm, llm, procedural)
        (eval_dir / "ground_truth.md").write_text(truth + "\n", encoding="utf-8")
        bank = generate_questions(truth, llm, procedural, cfg.questions, cfg.seed, semantic.schema.name)
    bank.save(eval_dir / "bank.json")
    print(f"wrote {eval_dir / 'bank.json'} ({len(bank)} questions, provenance {bank.provenance})")
    return EXIT_OK


def cmd_monitor(cfg: RunConfig) -> int:
    semantic = _semantic(cfg)
    cfg.subdir("memory")
    episodic = EpisodicMemory.load(cfg.episodic_path) if cfg.episodic_path.is_file() \
        else EpisodicMemory(cfg.episodic_path)
    report, log = _monitor_once(cfg, cfg.method, semantic, episodic, make_backend(cfg))
    path = _save_report(cfg, report, log)
    print(f"wrote {path} (action: {report.action or 'not stated'}, "
          f"{report.metrics.get('calls', 0)} LLM calls)")
    return EXIT_OK


def _judge_report(cfg: RunConfig, report: MonitoringReport, bank: QuestionBank, backend, name: str) -> EvalMetrics:
    llm = RecordingLLM(backend, cfg.llm_model, cfg.temperature)
    sheet = judge(report, bank, llm, _procedural(cfg), cfg.parallelism)
    sheet.save(cfg.subdir("eval") / f"answers-{name}.json")
    return score(sheet, bank)


def cmd_eval(cfg: RunConfig) -> int:
    semantic = _semantic(cfg)
    backend = make_backend(cfg)
    bank = _load_bank(cfg, semantic)
    rows: dict[str, EvalMetrics] = {}
    for method in cfg.methods:
        runs = []
        for r in range(cfg.runs):
            report, log = _monitor_once(cfg, method, semantic, EpisodicMemory(), backend)
            _save_report(cfg, report, log, f"-run{r + 1}")
            runs.append(_judge_report(cfg, report, bank, backend, f"{method}-run{r + 1}"))
        rows[method] = aggregate(runs)
    _write_tables(cfg, "metrics", rows, "Method", bank)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig) -> int:
    semantic = _semantic(cfg)
    backend = make_backend(cfg)
    bank = _load_bank(cfg, semantic)
    rows: dict[str, EvalMetrics] = {}
    calls: dict[str, int] = {}
    for label, flags in ABLATIONS:
        runs = []
        for r in range(cfg.runs):
            report, log = _monitor_once(cfg, "cama", semantic, EpisodicMemory(), backend,
                                        _procedural(cfg, **flags))
            _save_report(cfg, report, log, f"-run{r + 1}")
            calls[label] = int(report.metrics.get("calls", 0))
            slug = label.lower().replace("/", "").replace(" ", "-")
            runs.append(_judge_report(cfg, report, bank, backend, f"ablation-{slug}-run{r + 1}"))
        rows[label] = aggregate(runs)
    _write_tables(cfg, "ablation", rows, "Configuration", bank, calls)
    return EXIT_OK


def _write_tables(cfg: RunConfig, stem: str, rows: dict[str, EvalMetrics], label: str, bank: QuestionBank,
                  calls: dict[str, int] | None = None) -> None:
    table = metrics_table(rows, label)
    if calls is not None:
        lines = table.splitlines()
        lines[0] += " LLM calls |"
        lines[1] += "---|"
        lines[2:] = [f"{line} {calls[name]} |" for line, name in zip(lines[2:], rows)]
        table = "\n".join(lines) + "\n"
    eval_dir = cfg.subdir("eval")
    (eval_dir / f"{stem}.md").write_text(table, encoding="utf-8")
    _write_json(eval_dir / f"{stem}.json", {
        "config": cfg.to_dict(), "bank": {"dataset": bank.dataset, "provenance": bank.provenance, "size": len(bank)},
        "rows": {k: {**v.to_dict(), **({"calls": calls[k]} if calls else {})} for k, v in rows.items()},
    })
    print(table, end="")
    for name, m in rows.items():
        print(f"{name}: accuracy {pm(m.accuracy, m.accuracy_std)}%, unknown {pm(m.unknown_ratio, m.unknown_ratio_std)}%")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "questions": cmd_questions,
    "monitor": cmd_monitor,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cama", description="LLM-assisted ML model monitoring.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--out", default="out", help="output root (default: out)")
        sp.add_argument("--from-config", metavar="FILE",
                        help="re-run from the config embedded in an artifact; other flags are ignored")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--dataset", help=f"built-in dataset id ({', '.join(BUILTIN_IDS)})")
        sp.add_argument("--schema", help="schema JSON for a custom dataset")
        sp.add_argument("--data", help="data directory (default: OUT/data)")

    def llm_flags(sp):
        sp.add_argument("--backend", default="scripted", choices=["scripted", "http"])
        sp.add_argument("--script", help="scripted-backend rules JSON (default: shipped offline rules)")
        sp.add_argument("--base-url", help="chat-completions base URL (default: $CAMA_LLM_BASE_URL)")
        sp.add_argument("--llm-model", default="default", help="model name sent to the endpoint")
        sp.add_argument("--temperature", type=float, default=0.0)
        sp.add_argument("--parallelism", type=int, default=4)

    def monitor_flags(sp):
        sp.add_argument("--model", help="model JSON (default: OUT/model/model.json)")
        sp.add_argument("--test", help="test CSV to monitor (default: OUT/data/test.csv)")
        sp.add_argument("--sample-size", type=int, default=100)
        sp.add_argument("--alpha", type=float, default=0.05)

    g = sub.add_parser("generate", help="write synthetic train and drifted test CSVs")
    common(g, seed_default=7)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--drift", help="drift spec JSON (default: the dataset's built-in drift)")

    t = sub.add_parser("train", help="fit the logistic-regression model on OUT/data/train.csv")
    common(t)
    t.add_argument("--model", help="output model path (default: OUT/model/model.json)")
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--learning-rate", type=float, default=0.5)

    q = sub.add_parser("questions", help="build the multiple-choice question bank")
    common(q)
    monitor_flags(q)
    llm_flags(q)
    q.add_argument("--questions", type=int, default=DEFAULT_BANK_SIZE)
    q.add_argument("--manual", action="store_true", help="template-built bank from tool outputs, no LLM")

    m = sub.add_parser("monitor", help="run one monitoring pass and write the report")
    common(m)
    monitor_flags(m)
    llm_flags(m)
    m.add_argument("--method", default="cama", choices=METHODS)
    m.add_argument("--no-refactor", dest="refactor", action="store_false")
    m.add_argument("--no-breakdown", dest="breakdown", action="store_false")
    m.add_argument("--no-compile", dest="compile", action="store_false")

    e = sub.add_parser("eval", help="monitor, judge and score one or more methods")
    common(e)
    monitor_flags(e)
    llm_flags(e)
    e.add_argument("--methods", default="cama", help="comma-separated methods (default: cama)")
    e.add_argument("--runs", type=int, default=1)
    e.add_argument("--bank", help="question bank JSON (default: OUT/eval/bank.json, else template-built)")
    e.add_argument("--questions", type=int, default=DEFAULT_BANK_SIZE)

    a = sub.add_parser("ablation", help="judge the four pipeline configurations")
    common(a)
    monitor_flags(a)
    llm_flags(a)
    a.add_argument("--runs", type=int, default=1)
    a.add_argument("--bank", help="question bank JSON (default: OUT/eval/bank.json, else template-built)")
    a.add_argument("--questions", type=int, default=DEFAULT_BANK_SIZE)
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "from_config", None):
        doc = _read_json(Path(args.from_config))
        embedded = doc.get("config", doc) if isinstance(doc, dict) else None
        if isinstance(embedded, dict) and "config" in embedded.get("metadata", {}):
            embedded = embedded["metadata"]["config"]
        if not isinstance(embedded, dict) or "command" not in embedded:
            raise ConfigError(f"{args.from_config} carries no embedded run config")
        cfg = RunConfig.from_dict(embedded)
        if cfg.command != args.command:
            raise ConfigError(f"config is for '{cfg.command}', not '{args.command}'")
        return cfg.validate()
    values = {k: v for k, v in vars(args).items() if k in {f.name for f in fields(RunConfig)} and v is not None}
    if isinstance(values.get("methods"), str):
        values["methods"] = [m.strip() for m in values["methods"].split(",") if m.strip()]
    return RunConfig(**values).validate()


def _classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, LLMError):
        return "backend", EXIT_BACKEND
    if isinstance(exc, AgentError):
        cause = exc.__cause__
        if isinstance(cause, LLMError) or exc.stage in ("llm", "break_down", "global_analysis", "compile"):
            return "backend", EXIT_BACKEND
        return "agent", EXIT_OTHER
    if isinstance(exc, (DataError, SchemaError, ModelError, EvalError, FileNotFoundError, MemoryStoreError)):
        return "data", EXIT_DATA
    return "internal", EXIT_OTHER


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.command](cfg)
    except Exception as exc:  # every failure becomes one machine-readable line plus an exit code
        kind, code = _classify(exc)
        print(json.dumps({"error": kind, "exit_code": code, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        if args.verbose:
            logger.exception("command failed")
        return code


if __name__ == "__main__":
    sys.exit(main())
