"""Controller-in-the-loop split: wire codec (here) and lockstep sessions (``hilink.session``)."""

from .codec import (
    PROTOCOL_VERSION,
    Bye,
    CmdMsg,
    ErrorMsg,
    FrameError,
    Hello,
    HelloAck,
    MeasMsg,
    ProtocolError,
    decode_frame,
    encode_frame,
)
