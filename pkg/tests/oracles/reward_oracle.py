"""Straight-line task reward oracle on plain floats.

Conventions: branch tests, far-position terms and heading signs use the
horizontal separation; near terms and success tests use full planar distance.
"""
import math


def sit(obj_x, anchor_x, anchor_y, root_x, root_y, vel_x, speed=1.5):
    near = math.exp(-10.0 * ((anchor_x - root_x) ** 2 + (anchor_y - root_y) ** 2))
    dx = obj_x - root_x
    if abs(dx) > 0.5:
        heading = 1.0 if dx > 0 else -1.0
        far = 0.5 * math.exp(-0.5 * dx * dx) + 0.5 * math.exp(-2.0 * (speed - heading * vel_x) ** 2)
        return 0.7 * near + 0.3 * far
    return 0.7 * near + 0.3


def lie(obj_x, anchor_x, anchor_y, head_target, root_x, root_y, head_h, vel_x, speed=1.5):
    hip_sq = (anchor_x - root_x) ** 2 + (anchor_y - root_y) ** 2
    near = math.exp(-10.0 * hip_sq - 10.0 * (head_target - head_h) ** 2)
    dx = obj_x - root_x
    if abs(dx) > 0.5:
        heading = 1.0 if dx > 0 else -1.0
        far = 0.5 * math.exp(-0.5 * dx * dx) + 0.5 * math.exp(-2.0 * (speed - heading * vel_x) ** 2)
        return 0.7 * near + 0.3 * far
    return 0.7 * near + 0.3


def carry(box_x, box_y, box_vx, target_x, target_y, root_x, root_vx, hand_h,
          walk_speed=1.5, carry_speed=1.5):
    dw = box_x - root_x
    if abs(dw) > 0.5:
        hw = 1.0 if dw > 0 else -1.0
        walk = 0.1 * math.exp(-0.5 * dw * dw) + 0.1 * math.exp(-2.0 * (walk_speed - hw * root_vx) ** 2)
    else:
        walk = 0.2
    near = 0.2 * math.exp(-10.0 * ((target_x - box_x) ** 2 + (target_y - box_y) ** 2))
    dc = target_x - box_x
    if abs(dc) > 0.5:
        hc = 1.0 if dc > 0 else -1.0
        carry_far = (0.2 * math.exp(-0.5 * dc * dc)
                     + 0.2 * math.exp(-2.0 * (carry_speed - hc * box_vx) ** 2)
                     + 0.1 * math.exp(-10.0 * (hand_h - box_y) ** 2))
        carry_part = carry_far + near
    else:
        carry_part = 0.2 + near
    return walk + carry_part
