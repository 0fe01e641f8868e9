"""Run configuration: one YAML file, ``${VAR}`` interpolation, stable validation codes."""
from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .llm_gateway import BackendConfig

# validation codes
E_PARSE = "E100"
E_MISSING_FIELD = "E101"
E_MISSING_FILE = "E102"
E_INVALID_VALUE = "E103"
E_UNKNOWN_BACKEND = "E104"
E_DUPLICATE_BACKEND = "E105"
E_TEMPLATE = "E106"
E_HEALTH = "E107"
E_NO_MOCK = "E108"
E_MODE = "E109"
E_LEXICON = "E110"
E_CORPUS = "E111"
E_ENV = "E112"

MODES = ("zero-shot", "few-shot")
_ENV_RE = re.compile(r"\$\{(\w+)(?::-([^}]*))?\}")


@dataclass(frozen=True)
class Issue:
    code: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} {self.field}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, issues: list[Issue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


@dataclass
class RunConfig:
    path: Path
    sha256: str
    corpus: Path
    lexicon: Path
    backends: list[BackendConfig]
    extraction_backend: str
    summarizers: list[str]
    evaluator: str
    summarizer_pools: list[list[str]]
    few_shot: Path | None = None
    template_dir: Path | None = None
    template_version: str = "v1"
    expert_identity: str = "psychiatrist"
    extraction_modes: list[str] = field(default_factory=lambda: ["zero-shot"])
    summarize_from: str = "zero-shot"
    fuzzy_threshold: float = 0.9
    letter_limit: int = 300
    k: int = 3
    include_ungrounded: bool = False
    max_in_flight: int = 4
    max_failure_rate: float = 0.5
    consistency_reduction: str = "max"
    scorers: dict = field(default_factory=dict)
    gold: Path | None = None
    output_dir: Path = Path("out")
    seed: int = 0

    def backend(self, name: str) -> BackendConfig:
        for b in self.backends:
            if b.name == name:
                return b
        raise KeyError(name)

    def role_backends(self) -> list[str]:
        names = [self.extraction_backend, *self.summarizers, self.evaluator]
        return list(dict.fromkeys(names))


def interpolate(value, issues: list[Issue], where: str = ""):
    """Replace ``${VAR}`` / ``${VAR:-default}`` in every string of a YAML tree."""
    if isinstance(value, dict):
        return {k: interpolate(v, issues, f"{where}.{k}" if where else str(k)) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, issues, f"{where}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, str):
        def repl(m):
            name, default = m.group(1), m.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            issues.append(Issue(E_ENV, where, f"environment variable {name} is not set"))
            return ""
        return _ENV_RE.sub(repl, value)
    return value


def _path(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def load_config(path: str | Path) -> RunConfig:
    """Parse and structurally check a config file; raises ConfigError with every issue found."""
    path = Path(path)
    issues: list[Issue] = []
    try:
        raw_bytes = path.read_bytes()
        data = yaml.safe_load(raw_bytes.decode("utf-8"))
    except (OSError, UnicodeDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([Issue(E_PARSE, "config", f"cannot parse {path}: {exc}")]) from exc
    if not isinstance(data, dict):
        raise ConfigError([Issue(E_PARSE, "config", "top level must be a mapping")])
    data = interpolate(data, issues)
    base = path.resolve().parent

    for name in ("corpus", "lexicon", "backends", "roles"):
        if name not in data:
            issues.append(Issue(E_MISSING_FIELD, name, "required field is missing"))

    backends = []
    seen = set()
    for i, raw in enumerate(data.get("backends") or []):
        if not isinstance(raw, dict):
            issues.append(Issue(E_INVALID_VALUE, f"backends[{i}]", "must be a mapping"))
            continue
        raw = dict(raw)
        if raw.get("mock_script"):
            raw["mock_script"] = str(_path(base, raw["mock_script"]))
        try:
            b = BackendConfig.from_dict(raw)
        except (TypeError, ValueError) as exc:
            issues.append(Issue(E_INVALID_VALUE, f"backends[{i}]", str(exc)))
            continue
        if b.name in seen:
            issues.append(Issue(E_DUPLICATE_BACKEND, f"backends[{i}].name", f"duplicate backend {b.name!r}"))
            continue
        seen.add(b.name)
        backends.append(b)

    roles = data.get("roles") or {}
    summarizers = roles.get("summarizers") or []
    if isinstance(summarizers, str):
        summarizers = [summarizers]
    pools = roles.get("summarizer_pools") or [summarizers]
    for role in ("extraction", "evaluator"):
        if not roles.get(role):
            issues.append(Issue(E_MISSING_FIELD, f"roles.{role}", "required role is missing"))
    if not summarizers:
        issues.append(Issue(E_MISSING_FIELD, "roles.summarizers", "at least one summarizer is required"))
    referenced = [("roles.extraction", roles.get("extraction")), ("roles.evaluator", roles.get("evaluator"))]
    referenced += [(f"roles.summarizers[{i}]", n) for i, n in enumerate(summarizers)]
    referenced += [(f"roles.summarizer_pools[{i}]", n) for i, pool in enumerate(pools) for n in pool]
    for where, name in referenced:
        if name and name not in seen:
            issues.append(Issue(E_UNKNOWN_BACKEND, where, f"no backend named {name!r}"))

    par = data.get("parallelism") or {}
    templates = data.get("templates") or {}
    modes = data.get("extraction_modes") or (["few-shot"] if data.get("few_shot") else ["zero-shot"])
    cfg = RunConfig(
        path=path,
        sha256=hashlib.sha256(raw_bytes).hexdigest(),
        corpus=_path(base, data.get("corpus")) or Path(),
        lexicon=_path(base, data.get("lexicon")) or Path(),
        backends=backends,
        extraction_backend=roles.get("extraction") or "",
        summarizers=list(summarizers),
        evaluator=roles.get("evaluator") or "",
        summarizer_pools=[list(p) for p in pools],
        few_shot=_path(base, data.get("few_shot")),
        template_dir=_path(base, templates.get("dir")),
        template_version=str(templates.get("version", "v1")),
        expert_identity=str(data.get("expert_identity", "psychiatrist")),
        extraction_modes=list(modes),
        summarize_from=data.get("summarize_from") or list(modes)[-1],
        fuzzy_threshold=data.get("fuzzy_threshold", 0.9),
        letter_limit=data.get("letter_limit", 300),
        k=data.get("candidates_per_summarizer", 3),
        include_ungrounded=bool(data.get("include_ungrounded", False)),
        max_in_flight=par.get("max_in_flight", 4),
        max_failure_rate=data.get("max_failure_rate", 0.5),
        consistency_reduction=data.get("consistency_reduction", "max"),
        scorers=data.get("scorers") or {},
        gold=_path(base, data.get("gold")),
        output_dir=_path(base, data.get("output_dir", "out")),
        seed=data.get("seed", 0),
    )
    issues.extend(check_values(cfg))
    if issues:
        raise ConfigError(issues)
    return cfg


def check_values(cfg: RunConfig) -> list[Issue]:
    issues = []

    def bad(name, msg):
        issues.append(Issue(E_INVALID_VALUE, name, msg))

    if not isinstance(cfg.k, int) or isinstance(cfg.k, bool) or cfg.k < 1:
        bad("candidates_per_summarizer", f"must be an integer >= 1, got {cfg.k!r}")
    if not isinstance(cfg.fuzzy_threshold, (int, float)) or not 0 < cfg.fuzzy_threshold <= 1:
        bad("fuzzy_threshold", f"must be in (0, 1], got {cfg.fuzzy_threshold!r}")
    if not isinstance(cfg.letter_limit, int) or cfg.letter_limit <= 0:
        bad("letter_limit", f"must be a positive integer, got {cfg.letter_limit!r}")
    if not isinstance(cfg.max_in_flight, int) or cfg.max_in_flight < 1:
        bad("parallelism.max_in_flight", f"must be an integer >= 1, got {cfg.max_in_flight!r}")
    if not isinstance(cfg.max_failure_rate, (int, float)) or not 0 <= cfg.max_failure_rate <= 1:
        bad("max_failure_rate", f"must be in [0, 1], got {cfg.max_failure_rate!r}")
    if cfg.consistency_reduction not in ("max", "mean"):
        bad("consistency_reduction", f"must be 'max' or 'mean', got {cfg.consistency_reduction!r}")
    if not isinstance(cfg.seed, int):
        bad("seed", f"must be an integer, got {cfg.seed!r}")
    if not cfg.expert_identity.strip():
        bad("expert_identity", "must be non-empty")
    for mode in cfg.extraction_modes:
        if mode not in MODES:
            issues.append(Issue(E_MODE, "extraction_modes", f"unknown mode {mode!r}"))
        if mode == "few-shot" and cfg.few_shot is None:
            issues.append(Issue(E_MODE, "few_shot", "few-shot mode needs a few_shot file"))
    if cfg.summarize_from not in cfg.extraction_modes:
        issues.append(Issue(E_MODE, "summarize_from", f"{cfg.summarize_from!r} is not an extraction mode"))
    for i, pool in enumerate(cfg.summarizer_pools):
        if not pool or len(set(pool)) != len(pool):
            bad(f"roles.summarizer_pools[{i}]", "must be a non-empty list of distinct backends")
    return issues


def check_files(cfg: RunConfig, offline: bool = False) -> list[Issue]:
    issues = []
    for name, p in (("corpus", cfg.corpus), ("lexicon", cfg.lexicon), ("few_shot", cfg.few_shot)):
        if p is not None and not p.is_file():
            issues.append(Issue(E_MISSING_FILE, name, f"file not found: {p}"))
    if cfg.gold is not None and not cfg.gold.is_dir():
        issues.append(Issue(E_MISSING_FILE, "gold", f"directory not found: {cfg.gold}"))
    for b in cfg.backends:
        if b.mock_script and not Path(b.mock_script).is_file():
            issues.append(Issue(E_MISSING_FILE, f"backends.{b.name}.mock_script", f"file not found: {b.mock_script}"))
        if offline and not b.mock_script:
            issues.append(Issue(E_NO_MOCK, f"backends.{b.name}", "offline mode needs a mock_script"))
        if not offline and not b.base_url and not b.mock_script:
            issues.append(Issue(E_MISSING_FIELD, f"backends.{b.name}.base_url", "no endpoint or mock_script"))
    return issues


def sanitized_backends(cfg: RunConfig) -> dict:
    """Backend settings safe to write into manifests (no credentials)."""
    out = {}
    for b in cfg.backends:
        out[b.name] = {
            "model": b.model,
            "base_url": b.base_url,
            "temperature": b.temperature,
            "max_tokens": b.max_tokens,
            "max_retries": b.max_retries,
            "mock_script": Path(b.mock_script).name if b.mock_script else None,
        }
    return out
