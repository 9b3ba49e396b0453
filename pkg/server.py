"""
Gliding-Vertex MCP Server

Exposes the oriented-object toolkit as MCP tools: encoding and decoding
the gliding-vertex representation, polygon IoU, oriented NMS and mAP
evaluation.

Modular layout:
- Core: geometry, representation, losses and NMS
- Services: data I/O, evaluation, simulation, training and the tool backends
- Utils: validators and formatters
"""

from typing import List

from mcp.server.fastmcp import FastMCP

from src.services.tool_service import ToolService

# Initialize the MCP server
mcp = FastMCP("gliding-vertex")


# IMPLEMENTATION OF TOOLS
# Tools are functions that can be called by the MCP client


@mcp.tool()
async def encode_polygon(coords: List[float]) -> str:
    """Encode a quadrangle as horizontal box, four length ratios and obliquity factor.

    Args:
        coords: Eight numbers x1 y1 x2 y2 x3 y3 x4 y4 (image coordinates, y down)
    """
    return await ToolService.encode_polygon(coords)


@mcp.tool()
async def decode_representation(x: float, y: float, w: float, h: float, alpha: List[float], r: float, t_r: float = 1.0) -> str:
    """Decode a gliding-vertex representation into a quadrangle.

    Args:
        x: Box center x
        y: Box center y
        w: Box width
        h: Box height
        alpha: Four length ratios in [0, 1] for the top, right, bottom and left sides
        r: Obliquity factor in [0, 1]
        t_r: Return the horizontal box when r > t_r (1.0 always returns the quadrangle)
    """
    return await ToolService.decode_representation(x, y, w, h, alpha, r, t_r)


@mcp.tool()
async def polygon_iou(first: List[float], second: List[float]) -> str:
    """Intersection over union of two convex quadrangles.

    Args:
        first: Eight coordinates of the first quadrangle
        second: Eight coordinates of the second quadrangle
    """
    return await ToolService.polygon_iou(first, second)


@mcp.tool()
async def suppress_detections(detections: str, iou_threshold: float = 0.5) -> str:
    """Per-class oriented non-maximum suppression.

    Args:
        detections: One detection per line: "class score x1 y1 x2 y2 x3 y3 x4 y4"
        iou_threshold: Overlap at which the lower-scoring detection is dropped (default 0.5)
    """
    return await ToolService.suppress_detections(detections, iou_threshold)


@mcp.tool()
async def evaluate_detections(detections: str, ground_truth: str, iou_threshold: float = 0.5, mode: str = "voc07") -> str:
    """Per-class average precision and mAP.

    Args:
        detections: Lines of "image_id class score x1 y1 ... x4 y4"
        ground_truth: Lines of "image_id x1 y1 ... x4 y4 class difficult"
        iou_threshold: Matching threshold (default 0.5; 0.7 for the strict protocol)
        mode: "voc07" (11-point) or "all-points"
    """
    return await ToolService.evaluate_detections(detections, ground_truth, iou_threshold, mode)


if __name__ == "__main__":
    # Initialize and run the server
    print("Gliding-Vertex MCP Server Running....")

    mcp.run()
