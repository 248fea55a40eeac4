"""Desk-scale tabletop simulator, synthetic human-video bank and evaluation harnesses."""

from .world import TASK_TYPES, TaskSpec, WorldState, generate_task, render, scripted_expert, step
from .humanbank import synthesize_human_bank

__all__ = ["TASK_TYPES", "TaskSpec", "WorldState", "generate_task", "render", "scripted_expert",
           "step", "synthesize_human_bank"]
