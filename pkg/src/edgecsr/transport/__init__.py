from .core import (ANY, CHANNEL_KIND, ChannelId, DeadlockError, EndOfChannel, Endpoint,
                   InprocNetwork, Mailbox, Message, TransportAborted, TransportConfig,
                   TransportError, Watchdog, channel_name)
from .streams import (BufferedReader, InNetworkIter, PlainReader, ProtocolError,
                      broadcast_stream, in_network_iter, make_reader, scatter_stream)
from .tcp import TcpEndpoint, parse_peers

__all__ = [
    "ANY", "CHANNEL_KIND", "ChannelId", "DeadlockError", "EndOfChannel", "Endpoint",
    "InprocNetwork", "Mailbox", "Message", "TransportAborted", "TransportConfig",
    "TransportError", "Watchdog", "channel_name", "BufferedReader", "InNetworkIter",
    "PlainReader", "ProtocolError", "broadcast_stream", "in_network_iter", "make_reader",
    "scatter_stream", "TcpEndpoint", "parse_peers",
]
