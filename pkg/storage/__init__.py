# result files and GP snapshots
