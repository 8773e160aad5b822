"""Joint semantic segmentation and semantic edge detection for point clouds, with an MCP server."""

from mcp.server.fastmcp import FastMCP

from jsenet.session import JSENetSession
from jsenet.settings import get_checkpoint_path

mcp = FastMCP("jsenet")

_session: JSENetSession | None = None


def get_session() -> JSENetSession:
    """Get the shared session (lazy initialization from JSENET_CHECKPOINT)."""
    global _session
    if _session is None:
        _session = JSENetSession(checkpoint=get_checkpoint_path())
    return _session


# Register all tools
from jsenet.tools import register_tools  # noqa: E402

register_tools(mcp)


def main():
    """Run the MCP server."""
    mcp.run(transport="stdio")
