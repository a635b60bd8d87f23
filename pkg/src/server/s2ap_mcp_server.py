"""
S2AP MCP Server

This module implements a standalone MCP server that exposes the scale
estimation and spatial attention pipeline as tools. It follows the Model
Context Protocol standard, communicating via stdio.
"""

import asyncio
import json
import logging
import sys
from typing import Any, Callable, Dict, List

from mcp.server import FastMCP
from mcp.types import TextContent

from src.api import bench as bench_api
from src.api.geometry import LandmarkSet, MeanShape, bbox_from_landmarks, synthetic_mean_shape
from src.api.scalemap import size_to_bin, zoom_target_length
from src.api.scenes import Scene
from src.core.config import BenchConfig, DecodeParams, LabelConfig, ScaleMapConfig, settings
from src.core.utils import InvalidInputError, S2APError, error_response, format_response

logger = logging.getLogger(__name__)


def _require(params: Dict[str, Any], name: str) -> Any:
    if params.get(name) is None:
        raise InvalidInputError(f"{name} is required")
    return params[name]


def _scalemap(params: Dict[str, Any]) -> ScaleMapConfig:
    return ScaleMapConfig(**params.get("scalemap", {}))


def size_to_bin_tool(params: Dict[str, Any]) -> Dict[str, Any]:
    assignment = size_to_bin(float(_require(params, "x")), float(_require(params, "l_max")), _scalemap(params))
    return format_response(True, data={"b": assignment.b, "raw": assignment.raw})


def zoom_target_length_tool(params: Dict[str, Any]) -> Dict[str, Any]:
    length = zoom_target_length(float(_require(params, "x")), float(_require(params, "l_max")), _scalemap(params))
    return format_response(True, data={"l_t": length})


def bbox_from_landmarks_tool(params: Dict[str, Any]) -> Dict[str, Any]:
    landmarks = LandmarkSet(_require(params, "landmarks"))
    mean_shape = MeanShape(params["mean_shape"]) if params.get("mean_shape") else synthetic_mean_shape()
    return format_response(True, data={"bbox": bbox_from_landmarks(landmarks, mean_shape).to_list()})


def decode_scene_tool(params: Dict[str, Any]) -> Dict[str, Any]:
    scene = Scene.from_dict(_require(params, "scene"))
    decode = DecodeParams(**params.get("decode", {}))
    labels = LabelConfig(**params.get("labels", {}))
    scalemap = _scalemap(params)
    predictor = bench_api.OraclePredictor(scalemap, labels)
    result = bench_api.run_pipeline(scene, predictor, decode, BenchConfig(), scalemap)
    return format_response(True, data=result.plan.to_dict())


def cost_report_tool(params: Dict[str, Any]) -> Dict[str, Any]:
    scenes = [Scene.from_dict(s) for s in _require(params, "scenes")]
    decode = DecodeParams(**params.get("decode", {}))
    labels = LabelConfig(**params.get("labels", {}))
    bench = BenchConfig(**params.get("bench", {}))
    scalemap = _scalemap(params)
    predictor = bench_api.OraclePredictor(scalemap, labels)
    report = bench_api.cost_report(scenes, decode, bench, predictor, scalemap)
    return format_response(True, data=report.summary())


def _run_tool(name: str, func: Callable[[Dict[str, Any]], Dict[str, Any]], params: Dict[str, Any]) -> str:
    logger.info(f"Running {name} with params: {params}")
    try:
        result = func(params or {})
    except S2APError as e:
        logger.error(f"Error in {name}: {e.message}")
        result = error_response(e)
    except (TypeError, ValueError) as e:
        logger.error(f"Error in {name}: {str(e)}")
        result = format_response(False, error=str(e), code=InvalidInputError.code)
    return json.dumps(result, sort_keys=True)


TOOLS: Dict[str, Any] = {
    "size_to_bin": (
        size_to_bin_tool,
        "Map a face size to its scale bin with parameters: x (required), l_max (required), scalemap (optional)",
    ),
    "zoom_target_length": (
        zoom_target_length_tool,
        "Long side that brings a face of size x to the anchor size with parameters: x (required), l_max (required)",
    ),
    "bbox_from_landmarks": (
        bbox_from_landmarks_tool,
        "Derive a face box from five landmarks with parameters: landmarks (required), mean_shape (optional)",
    ),
    "decode_scene": (
        decode_scene_tool,
        "Plan pyramid levels and masks for a scene from its ground-truth maps with parameters: scene (required), "
        "decode (optional), labels (optional)",
    ),
    "cost_report": (
        cost_report_tool,
        "Dense versus planned detector FLOPs with parameters: scenes (required), decode (optional), bench (optional)",
    ),
}


class S2APMCPServer(FastMCP):
    """An MCP server for the S2AP pipeline."""

    def __init__(self):
        """Initialize the S2AP MCP server."""
        super().__init__(
            name="s2ap-mcp",
            instructions="Use this server to estimate face scales, plan image pyramids and cost masked detection",
        )
        logger.info(f"Initializing S2AP MCP server v{settings.VERSION}")

        self._register_tools()

    def _register_tools(self):
        """Register all S2AP tools."""
        for name, (func, description) in TOOLS.items():
            self._register(name, func, description)

    def _register(self, name: str, func: Callable[[Dict[str, Any]], Dict[str, Any]], description: str):
        @self.tool(name=name, description=description)
        async def tool(params: Dict[str, Any]) -> List[TextContent]:
            return [TextContent(type="text", text=_run_tool(name, func, params))]


async def main():
    """Main entry point for the MCP server."""
    try:
        logger.info("Starting S2AP MCP server")
        server = S2APMCPServer()

        await server.run_stdio_async()

    except Exception as e:
        logger.error(f"Error in S2AP MCP server: {str(e)}", exc_info=True)
        raise


def run():
    """Console-script entry point."""
    from src.main import setup_logging

    setup_logging()
    asyncio.run(main())


if __name__ == "__main__":
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(line_buffering=True)

    run()
