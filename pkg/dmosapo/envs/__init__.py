from dmosapo.core.exceptions import UnknownComponentError
from dmosapo.envs.base import Environment
from dmosapo.envs.linear import LinearEnv
from dmosapo.envs.pendulum import PendulumEnv
from dmosapo.envs.push import PushEnv


def build_env(cfg) -> Environment:
    """Instantiate the environment named by an ``EnvConfig``."""
    if cfg.name == "push":
        return PushEnv(
            observation=cfg.observation,
            shape=cfg.shape,
            view_mask=cfg.view_mask,
            episode_len=cfg.episode_len,
        )
    if cfg.name == "pendulum":
        return PendulumEnv(episode_len=min(cfg.episode_len, 200))
    if cfg.name == "linear":
        return LinearEnv(episode_len=min(cfg.episode_len, 100))
    raise UnknownComponentError("environment", cfg.name, ["push", "pendulum", "linear"])


__all__ = ["Environment", "LinearEnv", "PendulumEnv", "PushEnv", "build_env"]
