"""Cache timing-channel guessing game: simulator, environment, agents,
detectors and attack analysis."""

from .cache import Cache, CacheConfig, Domain, Latency
from .env import NOACCESS, CacheGuessingGameEnv, EnvConfig, RewardConfig, load_config, parse_config

__version__ = "0.1.0"
