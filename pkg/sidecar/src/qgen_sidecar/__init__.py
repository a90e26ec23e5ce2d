"""HTTP sidecar serving completion, embedding, and scoring wire contracts."""

__version__ = "0.1.0"

from .app import create_app
from .config import SidecarConfig, load_config
