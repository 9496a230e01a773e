"""Device-coordination middleware.

Executes device-independent coordination logic over heterogeneous devices:
devices controllable by major standard means (REST, SOAP) are invoked
directly from the coordination server, while devices with minor native
interfaces receive abstract instructions translated by a gateway.
"""

__version__ = "0.1.0"
