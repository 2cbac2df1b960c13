"""Multi-task knowledge distillation with audience-tagged explanation stories."""

__version__ = "0.1.0"
