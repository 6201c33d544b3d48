"""Trainable and analytic vector fields, the toy codec, datasets and training."""
