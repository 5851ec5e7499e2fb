import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from dotenv import load_dotenv

from etcseg.errors import ConfigError

# Load environment variables
load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}", {'key': name})
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}", {'key': name})
    return value


class Config:
    """Process-level settings read from the environment"""
    NUM_THREADS = _env_int('ETC_NUM_THREADS', 1)
    LOG_LEVEL = os.getenv('ETC_LOG_LEVEL', 'INFO').upper()
    PROFILE = os.getenv('ETC_PROFILE', 'default')

    @classmethod
    def num_threads(cls) -> int:
        # re-read so tests and long-lived processes see updates
        return _env_int('ETC_NUM_THREADS', cls.NUM_THREADS)


def _key(help_text: str, **kwargs):
    return field(metadata={'help': help_text}, **kwargs)


@dataclass
class TrainConfig:
    """Every hyperparameter, schedule, seed and path of a run"""
    seed: int = _key("master seed for data, init and batch sampling", default=1337)
    iterations: int = _key("optimizer steps", default=2000)
    t_max: Optional[int] = _key("ramp-up horizon for lambda; null means iterations", default=None)
    w_max: float = _key("maximum weight of the unsupervised terms", default=0.1)
    lr0: float = _key("initial SGD learning rate", default=0.1)
    poly_power: float = _key("exponent of the poly learning-rate decay", default=0.9)
    momentum: float = _key("SGD momentum", default=0.9)
    batch_labeled: int = _key("labeled images per batch", default=2)
    batch_unlabeled: int = _key("unlabeled images per batch", default=2)
    num_classes: int = _key("number of classes K, background included", default=3)
    widths: Tuple[int, int, int] = _key("encoder channel widths", default=(16, 32, 64))
    head_bias_init: float = _key("initial bias of the evidence heads", default=-2.0)
    kl_warmup: int = _key("iterations until lambda_kl reaches 1", default=200)
    dice_eps: float = _key("smoothing constant of the evidential Dice loss", default=1e-5)
    dataset_path: str = _key("dataset root holding train/ and test/", default='data/synthetic')
    n_samples: int = _key("training samples generated", default=200)
    n_test: int = _key("test samples generated", default=50)
    height: int = _key("image height (divisible by 4)", default=64)
    width: int = _key("image width (divisible by 4)", default=64)
    noise_sigma: float = _key("additive Gaussian noise level", default=0.35)
    blur_radius: int = _key("box blur radius in pixels", default=1)
    labeled_fraction: float = _key("fraction of training samples with labels", default=0.1)
    eval_every: int = _key("iterations between evaluations", default=500)
    checkpoint_every: Optional[int] = _key("iterations between checkpoints; null means eval_every", default=None)
    output_dir: str = _key("run directory for histories and weights", default='runs/etc')
    checkpoint_path: Optional[str] = _key("checkpoint directory; null means <output_dir>/checkpoint", default=None)
    resume: bool = _key("resume from the checkpoint when one exists", default=True)
    progress: bool = _key("show a progress bar", default=True)
    supervised_only: bool = _key("baseline: lambda=0 and labeled data only", default=False)
    force_lambda: Optional[float] = _key("pin lambda to this value", default=None)
    use_cs12: bool = _key("enable the ECB->EPB cross-supervision term", default=True)
    use_cs21: bool = _key("enable the EPB->ECB cross-supervision term", default=True)
    use_efb: bool = _key("enable the fusion-distillation term", default=True)
    weight_cs12: bool = _key("weight ECB pseudo labels by 1-u (false: weight 1)", default=True)
    weight_cs21: bool = _key("weight EPB pseudo labels by 1-u (false: weight 1)", default=True)

    # -- derived values --------------------------------------------------------
    @property
    def ramp_horizon(self) -> int:
        return self.t_max if self.t_max is not None else self.iterations

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every if self.checkpoint_every is not None else self.eval_every

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoint_path) if self.checkpoint_path else Path(self.output_dir) / 'checkpoint'

    @property
    def unlabeled_per_batch(self) -> int:
        return 0 if self.supervised_only else self.batch_unlabeled

    # -- validation ------------------------------------------------------------
    def validate(self) -> 'TrainConfig':
        checks = [
            ('seed', self.seed >= 0, "must be >= 0"),
            ('iterations', self.iterations > 0, "must be > 0"),
            ('labeled_fraction', 0 < self.labeled_fraction < 1, "must be in (0, 1)"),
            ('lr0', self.lr0 > 0, "must be > 0"),
            ('t_max', self.t_max is None or self.t_max > 0, "must be > 0"),
            ('num_classes', self.num_classes >= 2, "must be >= 2"),
            ('height', self.height > 0 and self.height % 4 == 0, "must be a positive multiple of 4"),
            ('width', self.width > 0 and self.width % 4 == 0, "must be a positive multiple of 4"),
            ('batch_labeled', self.batch_labeled >= 1, "must be >= 1"),
            ('batch_unlabeled', self.batch_unlabeled >= 0, "must be >= 0"),
            ('eval_every', self.eval_every >= 1, "must be >= 1"),
            ('checkpoint_every', self.checkpoint_every is None or self.checkpoint_every >= 1, "must be >= 1"),
            ('widths', len(self.widths) == 3 and all(w > 0 for w in self.widths), "must be three positive ints"),
            ('n_samples', self.n_samples >= 1, "must be >= 1"),
            ('kl_warmup', self.kl_warmup > 0, "must be > 0"),
            ('w_max', self.w_max >= 0, "must be >= 0"),
            ('dice_eps', self.dice_eps > 0, "must be > 0"),
            ('poly_power', self.poly_power > 0, "must be > 0"),
            ('momentum', 0 <= self.momentum < 1, "must be in [0, 1)"),
            ('n_test', self.n_test >= 0, "must be >= 0"),
            ('noise_sigma', self.noise_sigma >= 0, "must be >= 0"),
            ('blur_radius', self.blur_radius >= 0, "must be >= 0"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"{key} {message} (got {getattr(self, key)!r})", {'key': key})
        return self

    # -- (de)serialization -----------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['widths'] = list(self.widths)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def keys(cls) -> Iterable[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def help_lines(cls) -> Iterable[str]:
        defaults = cls()
        for f in fields(cls):
            yield f"{f.name} (default {getattr(defaults, f.name)!r}): {f.metadata['help']}"

    def updated(self, values: Dict[str, Any]) -> 'TrainConfig':
        data = self.to_dict()
        known = {f.name: f for f in fields(self)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", {'key': key})
            data[key] = _coerce(key, raw, getattr(self, key), known[key].type)
        data['widths'] = tuple(data['widths'])
        return TrainConfig(**data)


def _coerce(key: str, raw: Any, current: Any, annotation: Any) -> Any:
    """Convert a JSON or command-line value to the field's declared type"""
    type_name = str(annotation)
    if raw is None or (isinstance(raw, str) and raw.lower() in ('null', 'none')):
        if 'Optional' in type_name:
            return None
        raise ConfigError(f"{key} may not be null", {'key': key})
    try:
        if 'Tuple' in type_name:
            items = raw.split(',') if isinstance(raw, str) else list(raw)
            return tuple(int(item) for item in items)
        if 'bool' in type_name:
            if isinstance(raw, bool):
                return raw
            lowered = str(raw).lower()
            if lowered in ('true', '1', 'yes'):
                return True
            if lowered in ('false', '0', 'no'):
                return False
            raise ValueError(raw)
        if 'int' in type_name:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if 'float' in type_name:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type_name}", {'key': key})


# Presets selected by ETC_PROFILE
profiles: Dict[str, Dict[str, Any]] = {
    'desk': {},
    'smoke': {
        'iterations': 20,
        'n_samples': 24,
        'n_test': 8,
        'height': 16,
        'width': 16,
        'widths': (4, 8, 8),
        'labeled_fraction': 0.25,
        'eval_every': 10,
        'kl_warmup': 10,
        'progress': False,
    },
    'full': {
        'iterations': 30000,
        't_max': 1000,
        'eval_every': 1000,
    },
}
profiles['default'] = profiles['desk']


def load_train_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                      profile: Optional[str] = None) -> TrainConfig:
    """Resolve preset -> JSON file -> overrides into a validated TrainConfig"""
    profile = profile or Config.PROFILE
    if profile not in profiles:
        raise ConfigError(f"unknown profile {profile!r}", {'key': 'ETC_PROFILE'})
    config = TrainConfig().updated(profiles[profile])
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}", {'path': str(config_path)})
        try:
            file_values = json.loads(config_path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}", {'path': str(config_path)})
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object", {'path': str(config_path)})
        config = config.updated(file_values)
    if overrides:
        config = config.updated(overrides)
    return config.validate()
