"""Speaker/listener emergent communication in gridworld mazes."""

__version__ = "0.1.0"
