"""Policy-gradient learning of finite state controllers for POMDPs."""

__version__ = "0.1.0"
