"""Exploration-driven representation pretraining for embodied perception.

Stage 1 trains a recurrent PPO agent on novelty rewards while a k-step inverse
dynamics model shares its visual backbone. Stage 2 finetunes perception heads
on frames sampled during exploration and evaluates them on unseen scenes.
"""
from .config import RunConfig, config_hash, parse_config, serialize_config

__version__ = "0.1.0"
