"""Fixed dataset constants: grid geometry, normalization and the station registry."""

GRID_SIZE = 64
CROP_SIZE = 288
N_LAGS = 12
LEAD_STEPS = 6  # +30 minutes at 5-minute cadence
RADAR_STEP_MIN = 5
STATION_STEP_MIN = 10

# largest 5-minute accumulation (mm) in the 2016-2019 corpus
PRECIP_MAX_MM = 47.83
# radar containers store mm as uint16 hundredths
RADAR_SCALE = 0.01

# lon 4.29-6.73 E, lat 51.32-52.81 N
BOUNDS = {"lon_min": 4.29, "lon_max": 6.73, "lat_min": 51.32, "lat_max": 52.81}

EARTH_RADIUS_KM = 6371.0

TRAIN_YEARS = (2016, 2017, 2018)
TEST_YEARS = (2019,)
VAL_FRACTION = 0.1
RAIN_FRACTION = 0.5

THRESHOLDS_MMH = (0.5, 10.0, 20.0)

# fixed order of the station variable axis
VARIABLES = (
    "air_temperature",
    "humidity",
    "atmospheric_pressure",
    "avg_wind_speed",
    "wind_direction",
    "std_wind_direction",
    "std_wind_speed",
    "max_wind_speed",
)
N_VARIABLES = len(VARIABLES)

# (station_id, lat, lon). Approximate KNMI automatic-station positions; five
# ids share a site with another id, giving 17 distinct locations.
STATIONS = (
    ("06235", 52.928, 4.781),  # De Kooy
    ("06240", 52.318, 4.790),  # Schiphol
    ("06249", 52.644, 4.979),  # Berkhout
    ("06257", 52.506, 4.603),  # Wijk aan Zee
    ("06260", 52.100, 5.180),  # De Bilt
    ("06261", 52.100, 5.180),  # De Bilt (second mast)
    ("06267", 52.898, 5.384),  # Stavoren
    ("06269", 52.458, 5.520),  # Lelystad
    ("06270", 52.458, 5.520),  # Lelystad (second mast)
    ("06273", 52.703, 5.888),  # Marknesse
    ("06275", 52.056, 5.873),  # Deelen
    ("06278", 52.435, 6.259),  # Heino
    ("06283", 52.069, 6.657),  # Hupsel
    ("06290", 52.274, 6.891),  # Twenthe
    ("06330", 51.992, 4.122),  # Hoek van Holland
    ("06340", 51.449, 4.342),  # Woensdrecht
    ("06341", 51.449, 4.342),  # Woensdrecht (second mast)
    ("06344", 51.962, 4.447),  # Rotterdam
    ("06348", 51.970, 4.926),  # Cabauw
    ("06349", 51.970, 4.926),  # Cabauw (second mast)
    ("06350", 51.566, 4.936),  # Gilze-Rijen
    ("06350B", 51.566, 4.936),  # Gilze-Rijen (second mast)
)
N_STATIONS = len(STATIONS)
STATION_IDS = tuple(s[0] for s in STATIONS)
