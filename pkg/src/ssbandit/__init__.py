"""Self-supervised contextual bandits."""
