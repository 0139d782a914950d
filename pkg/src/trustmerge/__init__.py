"""Trust-adaptive game-theoretic on-ramp merging simulator."""

from .config import ScenarioConfig, init_merge_scenario, load_config
from .logs import EpisodeLog, log_hash, read_log, write_log
from .metrics import ablation_compare, episode_metrics, wilcoxon_signed_rank
from .sim import Simulation, detect_events, run_episode

__version__ = "0.1.0"

__all__ = [
    "ScenarioConfig", "init_merge_scenario", "load_config",
    "EpisodeLog", "log_hash", "read_log", "write_log",
    "ablation_compare", "episode_metrics", "wilcoxon_signed_rank",
    "Simulation", "detect_events", "run_episode",
    "__version__",
]
