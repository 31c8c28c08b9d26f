from .app import ServerState, ServerThread, create_app, serve
from .config import LatencyModel, ServerConfig, parse_listen

__all__ = ["ServerState", "ServerThread", "create_app", "serve", "LatencyModel", "ServerConfig", "parse_listen"]
