"""Dense 4D point-cloud reconstruction of egocentric video from depth, flow and masks."""
