"""HTTP reference server exposing a CNN's predictions and activations."""

__version__ = "0.1.0"

from .app import create_app
from .models import ServerConfig, build_model
