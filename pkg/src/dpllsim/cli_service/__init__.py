"""Command line, configuration files, CSV/manifest outputs and the TCP monitor."""

from .config import RunConfig, load_config, parse_config
from .main import EXIT_CONFIG, EXIT_OK, EXIT_WARNING, main
from .monitor import MonitorServer, serve_monitor

__all__ = ["RunConfig", "load_config", "parse_config", "main", "MonitorServer", "serve_monitor",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_WARNING"]
