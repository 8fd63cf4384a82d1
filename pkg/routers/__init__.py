# HTTP endpoints for experiment runs
