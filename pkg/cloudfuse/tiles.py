"""
Slippy-map (XYZ) tile addressing on the spherical Mercator projection.
"""
import math
from collections import namedtuple

from .const import MAX_MERCATOR_LAT
from .errors import TileRangeError


class TileCoord(namedtuple("TileCoord", ["z", "x", "y"])):
    __slots__ = ()

    def __new__(cls, z, x, y):
        z, x, y = int(z), int(x), int(y)
        if z < 0:
            raise TileRangeError("Zoom must be >= 0, got %d" % z)
        n = 1 << z
        if not (0 <= x < n and 0 <= y < n):
            raise TileRangeError(
                "Tile (%d, %d) is outside the %dx%d grid at z=%d" % (x, y, n, n, z)
            )
        return super(TileCoord, cls).__new__(cls, z, x, y)

    def __str__(self):
        return "%d/%d/%d" % (self.z, self.x, self.y)


def lonlat_to_tile(lon, lat, z):
    if not abs(lat) < MAX_MERCATOR_LAT:
        raise TileRangeError(
            "Latitude %r is outside the Web-Mercator range (+/-%.5f)" % (lat, MAX_MERCATOR_LAT)
        )
    if not -180.0 <= lon < 180.0:
        raise TileRangeError("Longitude %r is outside [-180, 180)" % lon)
    n = 1 << z
    phi = math.radians(lat)
    x = int(math.floor((lon + 180.0) / 360.0 * n))
    y = int(math.floor((1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * n))
    # Guard against float round-off right at the grid edge.
    return TileCoord(z, min(max(x, 0), n - 1), min(max(y, 0), n - 1))


def _mercator_to_lat(mercator_y):
    return math.degrees(math.atan(math.sinh(mercator_y)))


def tile_bounds(tile):
    """
    Return (west, south, east, north) in degrees.
    """
    n = 1 << tile.z
    west = -180.0 + 360.0 * tile.x / n
    east = -180.0 + 360.0 * (tile.x + 1) / n
    north = _mercator_to_lat(math.pi * (1 - 2.0 * tile.y / n))
    south = _mercator_to_lat(math.pi * (1 - 2.0 * (tile.y + 1) / n))
    return west, south, east, north


def tile_center(tile):
    """
    Return the (lon, lat) of the tile's centre in projected space.
    """
    n = 1 << tile.z
    lon = -180.0 + 360.0 * (tile.x + 0.5) / n
    lat = _mercator_to_lat(math.pi * (1 - 2.0 * (tile.y + 0.5) / n))
    return lon, lat


def tiles_in_bbox(west, south, east, north, z):
    """
    Non-overlapping tiles covering a lon/lat box, row-major from the north-west corner.
    """
    top_left = lonlat_to_tile(west, north, z)
    bottom_right = lonlat_to_tile(east, south, z)
    tiles = []
    for y in range(top_left.y, bottom_right.y + 1):
        for x in range(top_left.x, bottom_right.x + 1):
            tiles.append(TileCoord(z, x, y))
    return tiles
