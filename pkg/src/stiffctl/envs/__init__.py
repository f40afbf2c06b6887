from stiffctl.envs.base import (
    ENV_IDS,
    ContractError,
    EnvConfig,
    Observation,
    StiffnessAction,
    SuccessFlags,
    Uncertainty,
    apply_uncertainties,
    compute_reward,
    goal_met,
    is_success,
    load_config_file,
    randomize_domain,
    reward_from_parts,
)
from stiffctl.envs.block import BlockEnv, block_config
from stiffctl.envs.chip import ChipEnv, chip_config
from stiffctl.envs.fingers import FingersEnv, fingers_config
from stiffctl.envs.core import ManipulationEnv


def default_config(env_id: str, **kw) -> EnvConfig:
    if env_id == "block":
        return block_config(**kw)
    if env_id == "chip":
        return chip_config(**kw)
    if env_id == "fingers":
        return fingers_config(**kw)
    raise ValueError(f"unknown env {env_id!r}")


def make_env(config: EnvConfig, seed=None) -> ManipulationEnv:
    cls = {"block": BlockEnv, "chip": ChipEnv, "fingers": FingersEnv}[config.env_id]
    return cls(config, seed)
