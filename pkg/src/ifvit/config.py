"""Run configuration: presets, INI files, ``--set`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .backbone import EARLY, INTERMEDIATE, ModelConfig
from .data import SceneSpec
from .errors import ConfigurationError

PRESETS = ("tiny", "desk", "paper")


@dataclass
class ModelSection:
    fusion: str = EARLY
    conditioning: str = "concat"
    depth: int = 13
    n_image: int = 4  # used only with intermediate fusion
    n_text: int = 1  # used only with intermediate fusion
    embed_dim: int = 512
    heads: int = 8
    mlp_ratio: int = 4
    patch_size: int = 2
    img_channels: int = 4
    img_size: int = 32
    text_len: int = 77
    text_in_dim: int = 768
    vocab_size: int = 0


@dataclass
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    omega: float = 3.0


@dataclass
class TrainSection:
    steps: int = 1_000_000
    batch_size: int = 256
    lr: float = 2e-4
    warmup: int = 5000
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.9
    cfg_drop_prob: float = 0.1
    checkpoint_every: int = 0
    n_train: int = 0


@dataclass
class DataSection:
    min_count: int = 1
    max_count: int = 5
    min_size: int = 5
    max_size: int = 7
    margin: int = 1


@dataclass
class EvalSection:
    n_per_prompt: int = 10
    omegas: str = "0,1,3"
    counts: str = "1,2,3,4,5"


@dataclass
class RunSection:
    preset: str = "paper"
    seed: int = 1234
    output_dir: str = "runs"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def model_config(self):
        m = dataclasses.asdict(self.model)
        if m["fusion"] != INTERMEDIATE:
            m["n_image"] = m["n_text"] = 0
        try:
            return ModelConfig(**m)
        except ConfigurationError as e:
            raise ConfigurationError(f"[model] {e}") from None

    def scene_spec(self):
        d = self.data
        try:
            return SceneSpec(canvas=self.model.img_size, min_count=d.min_count, max_count=d.max_count,
                             min_size=d.min_size, max_size=d.max_size, margin=d.margin,
                             text_len=self.model.text_len)
        except ValueError as e:
            raise ConfigurationError(f"[data] {e}") from None

    @property
    def omegas(self):
        return _number_list(self.eval.omegas, float, "eval.omegas")

    @property
    def eval_counts(self):
        return _number_list(self.eval.counts, int, "eval.counts")

    def validate(self):
        self.model_config()
        if self.model.vocab_size:
            self.scene_spec()
        if self.run.preset not in PRESETS:
            raise ConfigurationError(f"run.preset: expected one of {PRESETS}, got {self.run.preset!r}")
        d, t = self.diffusion, self.train
        checks = [
            (d.T >= 1, "diffusion.T must be >= 1"),
            (0.0 < d.beta_start <= d.beta_end < 1.0, "diffusion betas need 0 < beta_start <= beta_end < 1"),
            (1 <= d.sample_steps <= d.T, "diffusion.sample_steps must lie in [1, T]"),
            (t.steps >= 0 and t.warmup >= 0 and t.checkpoint_every >= 0, "train step counts must be >= 0"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.lr > 0.0, "train.lr must be positive"),
            (0.0 <= t.cfg_drop_prob <= 1.0, "train.cfg_drop_prob must lie in [0, 1]"),
            (self.eval.n_per_prompt >= 1, "eval.n_per_prompt must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        if not self.omegas:
            raise ConfigurationError("eval.omegas: need at least one value")
        counts = self.eval_counts
        if not counts or min(counts) < 1 or max(counts) > 5:
            raise ConfigurationError(f"eval.counts: values must lie in [1, 5], got {self.eval.counts!r}")
        return self


def _number_list(text, kind, key):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{key}: expected comma-separated {kind.__name__} values, got {text!r}") from None


def preset(name):
    """Built-in configuration ``tiny``, ``desk`` or ``paper``."""
    if name == "paper":
        cfg = RunConfig()
        cfg.run.preset = "paper"
        return cfg
    if name == "desk":
        return RunConfig(
            run=RunSection("desk", 1234, "runs"),
            model=ModelSection(fusion=INTERMEDIATE, conditioning="crossattn", depth=7, n_image=2, n_text=1,
                               embed_dim=64, heads=4, mlp_ratio=4, patch_size=4, img_channels=3, img_size=32,
                               text_len=8, text_in_dim=64, vocab_size=17),
            diffusion=DiffusionSection(),
            train=TrainSection(steps=20000, batch_size=32, lr=1e-3, warmup=500, checkpoint_every=2000,
                               n_train=20000),
            data=DataSection(min_size=5, max_size=7),
            eval=EvalSection(n_per_prompt=5),
        )
    if name == "tiny":
        return RunConfig(
            run=RunSection("tiny", 1234, "runs"),
            model=ModelSection(fusion=INTERMEDIATE, conditioning="crossattn", depth=5, n_image=1, n_text=1,
                               embed_dim=64, heads=4, mlp_ratio=2, patch_size=4, img_channels=3, img_size=16,
                               text_len=8, text_in_dim=64, vocab_size=17),
            diffusion=DiffusionSection(sample_steps=20),
            train=TrainSection(steps=2000, batch_size=16, lr=1e-3, warmup=100, checkpoint_every=500,
                               n_train=1000),
            data=DataSection(min_size=4, max_size=5),
            eval=EvalSection(n_per_prompt=1),
        )
    raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")


_SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _coerce(section, key, raw, typ):
    try:
        if typ in (int, "int"):
            return int(str(raw).replace("_", ""))
        if typ in (float, "float"):
            return float(raw)
        return str(raw)
    except ValueError:
        kind = typ if isinstance(typ, str) else typ.__name__
        raise ConfigurationError(f"{section}.{key}: expected {kind}, got {raw!r}") from None


def _field_types(obj):
    return {f.name: f.type for f in dataclasses.fields(obj)}


def set_value(cfg, dotted, raw):
    """Apply one ``section.key=value`` override."""
    if "." not in dotted:
        raise ConfigurationError(f"override key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}; expected one of {_SECTIONS}")
    sec = getattr(cfg, section)
    types = _field_types(sec)
    if key not in types:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    setattr(sec, key, _coerce(section, key, raw, types[key]))


def loads(text):
    """Parse an INI document. A ``[run] preset`` key selects the base preset;
    every other key overrides it."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config file: {e}") from None
    base = parser.get("run", "preset", fallback="paper")
    cfg = preset(base)
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            set_value(cfg, f"{section}.{key}", raw)
    return cfg.validate()


def load(path):
    try:
        with open(path) as f:
            return loads(f.read())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None


def dumps(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in _SECTIONS:
        sec = getattr(cfg, section)
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in dataclasses.asdict(sec).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump(cfg, path):
    with open(path, "w") as f:
        f.write(dumps(cfg))
