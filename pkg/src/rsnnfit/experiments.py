"""Desk-scale identification presets: fully visible, misspecified and hidden-modeled students."""
from __future__ import annotations

from dataclasses import replace

from .losses import LossSpec
from .synthgen import ExperimentPlan, StimulusRecipe, StudentPlan, TeacherConfig, \
    run_identification
from .trainer import TrainConfig

# lr is above the 1.5e-3 used at full scale: desk runs get a fixed epoch budget
DESK_TRAIN = TrainConfig(learning_rate=0.01, batch_size=20, max_epochs=150,
                         early_stop_patience=10)

SPECS = {
    "mle": "mle:1",
    "mle+psth+nc_mse": "mle:0.4,psth:0.1,nc_mse:50",
    "elbo+smh+psth+nc_mse": "elbo:0.4,smh:0.001,psth:0.1,nc_mse:50",
    "elbo+smh": "elbo:1,smh:0.001",
}


def student(name: str, seed: int, n_hidden: int = 0, spec: str = None,
            train: TrainConfig = DESK_TRAIN) -> StudentPlan:
    spec = LossSpec.parse(spec or SPECS[name])
    return StudentPlan(name, spec, replace(train, loss_spec=spec, seed=seed),
                       n_hidden=n_hidden, init_seed=seed)


def fully_visible_plan(seed: int, timesteps: int = 500, k_train: int = 200,
                       k_test: int = 200) -> ExperimentPlan:
    teacher = TeacherConfig(10, 10, 2, seed=seed, stimulus=StimulusRecipe(timesteps))
    return ExperimentPlan(teacher, (student("mle", seed),), k_train, 40, k_test, seed=seed)


def hidden_teacher(seed: int, timesteps: int = 500) -> TeacherConfig:
    """20 neurons, 10 hidden, with strong visible <-> hidden loops."""
    return TeacherConfig(20, 10, 2, hidden_out_scale=2.0, hidden_in_scale=6.0, seed=seed,
                         stimulus=StimulusRecipe(timesteps))


def hidden_plan(seed: int, timesteps: int = 500, k_train: int = 200,
                k_test: int = 200) -> ExperimentPlan:
    students = (student("mle", seed), student("mle+psth+nc_mse", seed),
                student("elbo+smh+psth+nc_mse", seed, n_hidden=10))
    return ExperimentPlan(hidden_teacher(seed, timesteps), students, k_train, 40, k_test,
                          seed=seed)


def run(plan: ExperimentPlan) -> dict:
    """``{student name: comparison row}``."""
    return {s.name: s.row() for s in run_identification(plan).students}
