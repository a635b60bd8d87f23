"""
Entry point module for the S2AP MCP Server.
"""

from src.server.s2ap_mcp_server import run

if __name__ == "__main__":
    run()
