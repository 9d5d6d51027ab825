from .pg import PGConfig, PGPolicy, PGPolicyStack, pg_generate, pg_sample_midpoint, pg_train
from .seq import PPOConfig, SeqAgent, SeqTransition, gae, ppo_train, seq_step

__all__ = ["PGConfig", "PGPolicy", "PGPolicyStack", "pg_generate", "pg_sample_midpoint", "pg_train",
           "PPOConfig", "SeqAgent", "SeqTransition", "gae", "ppo_train", "seq_step"]
