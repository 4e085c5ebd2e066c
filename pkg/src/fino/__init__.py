"""Flow policies trained with input-noise injection, plus entropy-guided
action selection for offline-to-online reinforcement learning."""

__version__ = "0.1.0"
