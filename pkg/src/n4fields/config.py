"""Run configuration: versioned ``key=value`` text with namespaced keys."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .cnn import TrainConfig, format_stack, parse_stack
from .errors import ConfigError
from .evaluation import MatchConfig, default_thresholds
from .imagecore import PatchGeometry
from .nnfield import SearchConfig

CONFIG_VERSION = 1

DEFAULT_STACK = ("conv5x48,relu,pool2,conv3x64,relu,pool2,"
                 "fc512,relu,dropout0.5,fc512,relu,dropout0.5,fc16")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_T = TrainConfig()

# key -> (parser, default)
KEYS = {
    "run.seed": (int, 0),
    "run.outputDir": (str, "runs/default"),
    "run.encoding": (str, "raw"),
    "run.codeDim": (int, 16),
    "geometry.inputSize": (int, 34),
    "geometry.outputSize": (int, 16),
    "net.stack": (str, DEFAULT_STACK),
    "train.batchSize": (int, _T.batch_size),
    "train.learningRate": (float, _T.learning_rate),
    "train.momentum": (float, _T.momentum),
    "train.initSigma": (float, _T.init_sigma),
    "train.initScheme": (str, _T.init_scheme),
    "train.maxFirstLayerNorm": (float, _T.max_first_layer_norm),
    "train.annealFactor": (float, _T.anneal_factor),
    "train.plateauEpochs": (int, _T.plateau_epochs),
    "train.minLearningRate": (float, _T.min_learning_rate),
    "train.epochs": (int, _T.epochs),
    "train.validationFraction": (float, _T.validation_fraction),
    "train.rotate": (_bool, _T.rotate),
    "train.flip": (_bool, _T.flip),
    "train.samples": (int, 500_000),
    "train.codecSamples": (int, 50_000),
    "dict.size": (int, 100_000),
    "dict.leafSize": (int, 128),
    "search.maxComparisons": (int, 30),
    "search.exact": (_bool, False),
    "infer.scales": (_floats, (0.5, 1.0, 2.0)),
    "infer.committee": (int, 3),
    "infer.stride": (int, 1),
    "match.tolerance": (float, 0.75e-2),
    "match.thresholds": (int, 99),
    "baseline.mode": (str, "patch"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, value) -> None:
        """Set ``key`` from a string or a typed value."""
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, _ = KEYS[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def update(self, overrides: dict) -> "RunConfig":
        for k, v in overrides.items():
            self.set(k, v)
        self.validate()
        return self

    def validate(self) -> None:
        """Build every derived config once so bad values fail early."""
        if self["run.encoding"] not in ("raw", "alternative"):
            raise ConfigError(f"run.encoding must be raw or alternative, got {self['run.encoding']!r}")
        if self["baseline.mode"] not in ("central", "patch"):
            raise ConfigError("baseline.mode must be central or patch")
        if self["infer.committee"] < 1:
            raise ConfigError("infer.committee must be >= 1")
        self.geometry()
        self.train_config()
        self.search_config()
        self.match_config()
        self.stack()

    def geometry(self) -> PatchGeometry:
        return PatchGeometry(self["geometry.inputSize"], self["geometry.outputSize"])

    def stack(self):
        return parse_stack(self["net.stack"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["train.batchSize"], learning_rate=v["train.learningRate"],
            momentum=v["train.momentum"], init_sigma=v["train.initSigma"],
            init_scheme=v["train.initScheme"],
            max_first_layer_norm=v["train.maxFirstLayerNorm"],
            anneal_factor=v["train.annealFactor"], plateau_epochs=v["train.plateauEpochs"],
            min_learning_rate=v["train.minLearningRate"], epochs=v["train.epochs"],
            validation_fraction=v["train.validationFraction"],
            rotate=v["train.rotate"], flip=v["train.flip"], seed=v["run.seed"],
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(self["search.maxComparisons"], self["search.exact"])

    def match_config(self) -> MatchConfig:
        return MatchConfig(self["match.tolerance"], default_thresholds(self["match.thresholds"]))

    def dumps(self) -> str:
        lines = [f"config.version={CONFIG_VERSION}"]
        for k in KEYS:
            v = self.values[k]
            if k == "net.stack" and not isinstance(v, str):
                v = format_stack(v)
            lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    version_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "config.version":
            if value != str(CONFIG_VERSION):
                raise ConfigError(f"{source}: unsupported config version {value}")
            version_seen = True
            continue
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
        cfg.set(key, value)
    if not version_seen:
        raise ConfigError(f"{source}: missing config.version line")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


DESK_STACK = ("conv5x16,relu,pool2,conv3x32,relu,pool2,"
              "fc128,relu,dropout0.5,fc128,relu,dropout0.5,fc16")


def desk_config() -> RunConfig:
    """Single-core budget: narrower stack, fewer samples, one scale."""
    return RunConfig().update({
        "net.stack": DESK_STACK,
        "train.initScheme": "fanin",
        "train.learningRate": 0.01,
        "train.epochs": 5,
        "train.plateauEpochs": 3,
        "train.samples": 20_000,
        "train.codecSamples": 20_000,
        "dict.size": 10_000,
        "infer.scales": (1.0,),
        "infer.committee": 1,
    })


PRESETS = {"full": RunConfig, "desk": desk_config}
