"""Sectioned ``key = value`` configs mapped onto the package dataclasses."""
from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from .losses import LossSpec
from .synthgen import ExperimentPlan, StimulusRecipe, StudentPlan, TeacherConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed config: unreadable syntax, missing section or key, bad value."""


def load(path_or_text, *, text: bool = False) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        if text:
            cp.read_string(path_or_text)
        else:
            path = Path(path_or_text)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:  # messages carry line numbers
        raise ConfigError(str(e)) from None
    return cp


def from_dict(sections: dict) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(sections)
    return cp


def to_dict(cp: configparser.ConfigParser) -> dict:
    return {s: dict(cp[s]) for s in cp.sections()}


def _section(cp, name):
    if not cp.has_section(name):
        raise ConfigError(f"missing section [{name}]")
    return cp[name]


def get(cp, section: str, key: str, kind=str, default=...):
    """Typed lookup; errors name ``section.key``."""
    if not cp.has_section(section) or key not in cp[section]:
        if default is ...:
            if not cp.has_section(section):
                raise ConfigError(f"missing section [{section}] (needed for key {section}.{key})")
            raise ConfigError(f"missing required key {section}.{key}")
        return default
    raw = cp[section][key].strip()
    try:
        if kind is bool:
            return cp[section].getboolean(key)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _check_keys(cp, section: str, allowed) -> None:
    extra = set(cp[section]) - set(allowed)
    if extra:
        raise ConfigError(f"[{section}]: unknown keys {sorted(extra)}; allowed: {sorted(allowed)}")


STIMULUS_KEYS = ("timesteps", "tau", "amplitude", "drive_hidden")
TEACHER_KEYS = ("n_total", "n_visible", "n_hidden", "d_max", "weight_scale", "hidden_out_scale",
                "hidden_in_scale", "target_rate", "rate_low", "rate_high", "rate_trials", "seed")
DATA_KEYS = ("k_train", "k_val", "k_test", "seed", "eval_trials")
TRAIN_TYPES = {"learning_rate": float, "batch_size": int, "max_epochs": int, "beta1": float,
               "beta2": float, "eps": float, "early_stop_patience": int, "eval_cadence": int,
               "seed": int, "free_trials": int, "sm_stats": str, "clip_norm": float,
               "batcher": str, "clip_length": int, "clip_trials": int}
TRAIN_KEYS = ("loss", "t_clamp") + tuple(TRAIN_TYPES)
STUDENT_KEYS = ("n_hidden", "d_max", "init", "init_seed", "loss", "t_clamp")


def stimulus_recipe(cp) -> StimulusRecipe:
    d = StimulusRecipe()
    if cp.has_section("stimulus"):
        _check_keys(cp, "stimulus", STIMULUS_KEYS)
    return StimulusRecipe(
        timesteps=get(cp, "stimulus", "timesteps", int, d.timesteps),
        tau=get(cp, "stimulus", "tau", float, d.tau),
        amplitude=get(cp, "stimulus", "amplitude", float, d.amplitude),
        drive_hidden=get(cp, "stimulus", "drive_hidden", bool, d.drive_hidden),
    )


def teacher_config(cp) -> TeacherConfig:
    _section(cp, "teacher")
    _check_keys(cp, "teacher", TEACHER_KEYS)
    nv = get(cp, "teacher", "n_visible", int)
    if "n_total" in cp["teacher"]:
        n_total = get(cp, "teacher", "n_total", int)
    else:
        n_total = nv + get(cp, "teacher", "n_hidden", int, 0)
    defaults = {f.name: f.default for f in fields(TeacherConfig) if f.name != "stimulus"}
    band = (get(cp, "teacher", "rate_low", float, defaults["rate_band"][0]),
            get(cp, "teacher", "rate_high", float, defaults["rate_band"][1]))
    try:
        return TeacherConfig(
            n_total=n_total, n_visible=nv,
            d_max=get(cp, "teacher", "d_max", int, defaults["d_max"]),
            weight_scale=get(cp, "teacher", "weight_scale", float, defaults["weight_scale"]),
            hidden_out_scale=get(cp, "teacher", "hidden_out_scale", float,
                                 defaults["hidden_out_scale"]),
            hidden_in_scale=get(cp, "teacher", "hidden_in_scale", float,
                                defaults["hidden_in_scale"]),
            rate_band=band,
            target_rate=get(cp, "teacher", "target_rate", float, defaults["target_rate"]),
            rate_trials=get(cp, "teacher", "rate_trials", int, defaults["rate_trials"]),
            stimulus=stimulus_recipe(cp),
            seed=get(cp, "teacher", "seed", int, defaults["seed"]),
        )
    except ValueError as e:
        raise ConfigError(f"[teacher]: {e}") from None


def data_sizes(cp) -> dict:
    _section(cp, "data")
    _check_keys(cp, "data", DATA_KEYS + ("dir",))
    out = {k: get(cp, "data", k, int) for k in ("k_train", "k_val", "k_test")}
    out["seed"] = get(cp, "data", "seed", int, 0)
    return out


def loss_spec(cp, section: str, fallback: str = None) -> LossSpec:
    text = get(cp, section, "loss", str, None)
    if text is None and fallback is not None:
        text = get(cp, fallback, "loss", str, None)
    if text is None:
        raise ConfigError(f"missing required key {section}.loss")
    t_clamp = get(cp, section, "t_clamp", int, None)
    if t_clamp is None and fallback is not None:
        t_clamp = get(cp, fallback, "t_clamp", int, None)
    try:
        return LossSpec.parse(text, t_clamp=t_clamp)
    except ValueError as e:
        raise ConfigError(f"{section}.loss: {e}") from None


def train_config(cp, section: str = "train", spec: LossSpec = None, fallback=None) -> TrainConfig:
    """``TrainConfig`` from ``section``, then ``fallback``, then the dataclass defaults."""
    for s in (section, fallback):
        if s and cp.has_section(s):
            _check_keys(cp, s, TRAIN_KEYS)
    spec = spec or loss_spec(cp, section, fallback)
    kw = {"loss_spec": spec}
    for key, kind in TRAIN_TYPES.items():
        value = get(cp, section, key, kind, None)
        if value is None and fallback:
            value = get(cp, fallback, key, kind, None)
        if value is not None:
            kw[key] = value
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise ConfigError(f"[{section}]: {e}") from None


def experiment_plan(cp) -> ExperimentPlan:
    teacher = teacher_config(cp)
    sizes = data_sizes(cp)
    # sorted so a plan and its manifest (written with sorted keys) agree on order
    names = sorted(s.split(".", 1)[1] for s in cp.sections() if s.startswith("student."))
    if not names:
        raise ConfigError("plan has no [student.NAME] section")
    known = {"teacher", "stimulus", "data", "train"} | {f"student.{n}" for n in names} \
        | {f"train.{n}" for n in names}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unexpected section [{s}]; expected [teacher], [stimulus], "
                              "[data], [train], [student.NAME] or [train.NAME]")
    students = []
    for name in names:
        sec = f"student.{name}"
        _check_keys(cp, sec, STUDENT_KEYS)
        spec = loss_spec(cp, sec, fallback=f"train.{name}" if cp.has_section(f"train.{name}")
                         else "train")
        tsec = f"train.{name}" if cp.has_section(f"train.{name}") else "train"
        cfg = train_config(cp, tsec, spec=spec, fallback="train" if tsec != "train" else None)
        try:
            students.append(StudentPlan(
                name=name, loss_spec=spec, train=cfg,
                n_hidden=get(cp, sec, "n_hidden", int, 0),
                d_max=get(cp, sec, "d_max", int, None),
                init=get(cp, sec, "init", str, "random"),
                init_seed=get(cp, sec, "init_seed", int, 0)))
        except ValueError as e:
            raise ConfigError(f"[{sec}]: {e}") from None
    return ExperimentPlan(teacher, tuple(students), sizes["k_train"], sizes["k_val"],
                          sizes["k_test"], eval_trials=get(cp, "data", "eval_trials", int, None),
                          seed=sizes["seed"])
