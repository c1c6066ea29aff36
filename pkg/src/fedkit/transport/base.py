"""Topic names and role wiring shared by every transport backend."""

TOPIC_GLOBAL = "fl/global"    # server -> all clients
TOPIC_UPDATES = "fl/updates"  # clients -> server
TOPIC_JOIN = "fl/join"        # clients -> server

ROLE_SUBSCRIPTIONS = {
    "server": frozenset({TOPIC_UPDATES, TOPIC_JOIN}),
    "client": frozenset({TOPIC_GLOBAL}),
}


class TransportError(RuntimeError):
    """Connection or send failure on a transport endpoint."""
