# Tests package for grid2point
