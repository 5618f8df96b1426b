"""Run configuration: INI text with sections, strict keys, task presets."""

import configparser
import io
from dataclasses import dataclass, field, fields, replace

TASKS = ("xor", "addition", "path")


class ConfigError(ValueError):
    pass


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _opt(section, default, parse=None, doc=""):
    return field(default=default, metadata={"section": section, "parse": parse, "doc": doc})


@dataclass(frozen=True)
class RunConfig:
    """All knobs of a run.  ``doc`` strings name the hyperparameter they set."""

    task: str = _opt("task", "xor", str, "xor | addition | path")
    n_digits: int = _opt("task", 1, int, "digits per number (addition)")
    side: int = _opt("task", 4, int, "grid side (path)")
    connectivity: str = _opt("task", "eight", str, "four | eight (path)")
    noise: float = _opt("task", 0.1, float, "feature noise sigma (xor, path)")
    patch: int = _opt("task", 3, int, "pixels per cell side (path)")
    n_train: int = _opt("task", 2000, int, "training examples (xor, path); 0 = whole split")
    n_test: int = _opt("task", 1000, int, "held-out examples; 0 = whole split")

    hidden: tuple = _opt("model", (32, 32), _ints, "hidden layer widths")
    layout: str = _opt("model", "shared", str, "joint | shared")
    context: bool = _opt("model", True, _bool, "shared layout sees the other positions")
    condition: bool = _opt("model", True, _bool, "network conditions on w^t")
    init_scale: float = _opt("model", 1.0, float, "weight init scale")

    lr: float = _opt("optim", 1e-3, float, "learning rate")
    batch_size: int = _opt("optim", 16, int, "minibatch size")
    epochs: int = _opt("optim", 10, int, "epochs")
    lr_schedule: str = _opt("optim", "constant", str, "constant | cosine (decays to lr_min over the run)")
    lr_min: float = _opt("optim", 0.0, float, "final learning rate of the cosine schedule")
    early_stopping: bool = _opt("optim", False, _bool, "keep the best epoch on held-out label accuracy")

    gamma_w: float = _opt("loss", 1e-5, float, "concept unmasking loss weight")
    gamma_H: float = _opt("loss", 0.01, float, "variational entropy weight")
    gamma_y: float = _opt("loss", 1.0, float, "output unmasking loss weight")

    S: int = _opt("estimator", 16, int, "RLOO samples")
    K: int = _opt("estimator", 16, int, "SNIS candidates")
    beta: float = _opt("estimator", 10.0, float, "soft-constraint penalty")
    entropy_mode: str = _opt("estimator", "unconditional", str, "unconditional | conditional")
    M: float = _opt("estimator", 70.0, float, "SNIS reward headroom")
    U: float = _opt("estimator", 100.0, float, "SNIS reward floor")
    T: int = _opt("estimator", 8, int, "discretisation steps")

    output_mode: str = _opt("eval", "PTM", str, "PTM | PMM | TMP | MMP")
    concept_mode: str = _opt("eval", "TM", str, "TM | MM")
    L: int = _opt("eval", 8, int, "majority-vote samples")
    ece_L: int = _opt("eval", 1000, int, "samples for marginal estimates")
    ece_bins: int = _opt("eval", 10, int, "ECE bins")
    ece_examples: int = _opt("eval", 200, int, "examples used for ECE (0 = all)")
    sweep: bool = _opt("eval", False, _bool, "evaluate all four output strategies")

    seed: int = _opt("run", 0, int, "random seed")

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs nonnegative")

    # ------------------------------------------------------------------
    @classmethod
    def keys_by_section(cls):
        out = {}
        for f in fields(cls):
            out.setdefault(f.metadata["section"], []).append(f.name)
        return out

    def to_ini(self):
        lines = []
        for section, names in self.keys_by_section().items():
            lines.append(f"[{section}]")
            lines.extend(f"{n} = {_fmt(getattr(self, n))}" for n in names)
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text, base=None):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        known = cls.keys_by_section()
        meta = {f.name: f for f in fields(cls)}
        values = {}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in known[section]:
                    raise ConfigError(f"unknown config key {key!r} in section [{section}]")
                try:
                    values[key] = meta[key].metadata["parse"](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        start = base if base is not None else preset(values.get("task", "xor"))
        return replace(start, **values)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_ini(fh.read())


_PRESETS = {
    "xor": dict(
        noise=0.1, n_train=1000, n_test=500, hidden=(32, 32), layout="shared", context=True, condition=True,
        lr=3e-3, lr_schedule="cosine", batch_size=16, epochs=24, gamma_w=1.5e-6, gamma_H=1.6, S=256, K=256, beta=10.0,
        entropy_mode="conditional", T=8, L=1000, output_mode="PTM", concept_mode="TM",
    ),
    "addition": dict(
        n_digits=1, n_train=0, n_test=0, hidden=(128,), layout="shared", context=False, condition=False,
        lr=3e-4, batch_size=16, epochs=12, gamma_w=2e-5, gamma_H=0.01, S=1024, K=1024, beta=20.0, T=8, L=8,
        init_scale=1.0,
    ),
    "path": dict(
        side=4, noise=0.5, patch=3, n_train=2000, n_test=500, hidden=(32,), layout="shared", context=False,
        condition=False, lr=5e-3, lr_schedule="cosine", batch_size=50, epochs=10, gamma_w=1e-5, gamma_H=0.002, S=16, K=4,
        beta=12.0, T=20, L=8,
    ),
}


def preset(task):
    """Per-task defaults."""
    if task not in _PRESETS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    return RunConfig(task=task, **_PRESETS[task])


def dump_docs():
    buf = io.StringIO()
    for f in fields(RunConfig):
        buf.write(f"[{f.metadata['section']}] {f.name}: {f.metadata['doc']}\n")
    return buf.getvalue()
