//! Closed-form sprite rasterizer: hard edges, no anti-aliasing.
//!
//! Identities are separated along three cues at once (shape, shade, size)
//! and pose jitter is kept sub-pixel so that a raw-pixel nearest-centroid
//! classifier stays well above 90% joint accuracy; clip diversity comes
//! from the jitter, the pulse direction, and the trajectory itself.

use super::FrameGeometry;
use crate::tensor::RngStream;

const SHAPE_COUNT: usize = 4;
const ACTION_COUNT: usize = 4;

/// Initial pose of a sprite, drawn once per clip.
#[derive(Debug, Clone, Copy)]
pub struct MotionState {
    pub x0: f32,
    pub y0: f32,
    /// Base half-size in pixels, before the identity size ladder.
    pub half: f32,
    /// Phase offset for periodic actions: 0.0 (grow first) or 0.5 (shrink).
    pub phase: f32,
}

impl MotionState {
    pub fn sample(rng: &mut RngStream, geom: FrameGeometry) -> Self {
        let jitter = geom.w as f32 / 64.0;
        let x0 = geom.w as f32 / 2.0 + (rng.uniform() as f32 - 0.5) * 2.0 * jitter;
        let y0 = geom.h as f32 / 2.0 + (rng.uniform() as f32 - 0.5) * 2.0 * jitter;
        let phase = if rng.uniform() < 0.5 { 0.0 } else { 0.5 };
        MotionState {
            x0,
            y0,
            half: geom.h as f32 * 0.13,
            phase,
        }
    }
}

fn wrap(v: f32, limit: f32) -> f32 {
    let r = v % limit;
    if r < 0.0 {
        r + limit
    } else {
        r
    }
}

/// Sprite center and base half-size at frame `t`.
///
/// Actions: 0 translate-right, 1 translate-down, 2 diagonal, 3 scale-pulse.
/// Translations wrap around the frame (torus), so the center coordinate at
/// frame t is exactly (x0 + v*t) mod W with v = W/8 px per frame. Action
/// indices beyond 3 repeat the patterns at higher velocity.
pub fn sprite_pose(
    action: usize,
    t: usize,
    geom: FrameGeometry,
    state: &MotionState,
) -> (f32, f32, f32) {
    let (w, h) = (geom.w as f32, geom.h as f32);
    let speed_up = 1.0 + (action / ACTION_COUNT) as f32 * 0.5;
    let v = w / 8.0 * speed_up;
    let tf = t as f32;
    match action % ACTION_COUNT {
        0 => (wrap(state.x0 + v * tf, w), state.y0, state.half),
        1 => (state.x0, wrap(state.y0 + v * tf, h), state.half),
        2 => (
            wrap(state.x0 + v * tf, w),
            wrap(state.y0 + v * tf, h),
            state.half,
        ),
        _ => {
            let cycle = (tf / 8.0 + state.phase) * std::f32::consts::TAU;
            (state.x0, state.y0, state.half * (1.0 + 0.4 * cycle.sin()))
        }
    }
}

fn inside_shape(shape: usize, dx: f32, dy: f32, half: f32) -> bool {
    match shape % SHAPE_COUNT {
        0 => dx.abs() <= half && dy.abs() <= half,
        1 => dx * dx + dy * dy <= half * half,
        // upward triangle: apex at the top, base at the bottom
        2 => dy >= -half && dy <= half && dx.abs() <= (dy + half) * 0.5,
        _ => {
            let arm = (half / 3.0).max(1.0);
            (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
        }
    }
}

/// Identity size ladder: each identity draws at a slightly different scale.
fn size_factor(identity: usize) -> f32 {
    1.0 + 0.15 * (identity % SHAPE_COUNT) as f32
}

/// Per-identity shade ladder for grayscale frames.
fn gray_level(identity: usize) -> f32 {
    let base = 0.25 + 0.75 * (identity % SHAPE_COUNT) as f32 / (SHAPE_COUNT - 1) as f32;
    // identities past the shape cycle darken slightly so they stay distinct
    (base - 0.08 * (identity / SHAPE_COUNT) as f32).max(0.15)
}

/// Per-identity color for 3-channel frames.
fn color(identity: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 4] = [
        [1.0, 0.35, 0.25],
        [0.25, 1.0, 0.35],
        [0.35, 0.55, 1.0],
        [1.0, 0.95, 0.30],
    ];
    PALETTE[identity % PALETTE.len()]
}

/// Rasterize one frame, `[C, H, W]` row-major, values in [0, 1]. Sprites
/// partially outside the frame are clipped at the border.
pub fn render_frame(
    identity: usize,
    action: usize,
    t: usize,
    geom: FrameGeometry,
    state: &MotionState,
) -> Vec<f32> {
    let (cx, cy, base_half) = sprite_pose(action, t, geom, state);
    let half = base_half * size_factor(identity);
    let mut frame = vec![0.0f32; geom.c * geom.h * geom.w];
    let shade = gray_level(identity);
    let rgb = color(identity);
    let plane = geom.h * geom.w;
    for y in 0..geom.h {
        for x in 0..geom.w {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if inside_shape(identity, dx, dy, half) {
                let px = y * geom.w + x;
                if geom.c == 1 {
                    frame[px] = shade;
                } else {
                    for ch in 0..geom.c {
                        frame[ch * plane + px] = rgb[ch % 3] * shade.max(0.55);
                    }
                }
            }
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> FrameGeometry {
        FrameGeometry { h: 32, w: 32, c: 1 }
    }

    fn state() -> MotionState {
        MotionState {
            x0: 10.0,
            y0: 12.0,
            half: 4.0,
            phase: 0.5,
        }
    }

    #[test]
    fn translate_right_center_follows_mod_rule() {
        let g = geom();
        let s = state();
        let v = 4.0; // W / 8
        for t in 0..20 {
            let (cx, cy, _) = sprite_pose(0, t, g, &s);
            let expected = (10.0f32 + v * t as f32) % 32.0;
            assert!((cx - expected).abs() < 1e-4, "t={t}: {cx} vs {expected}");
            assert_eq!(cy, 12.0);
        }
    }

    #[test]
    fn frame_zero_matches_initial_pose() {
        let g = geom();
        let s = state();
        for action in 0..4 {
            let (cx, cy, _) = sprite_pose(action, 0, g, &s);
            assert_eq!((cx, cy), (10.0, 12.0), "action {action}");
        }
    }

    #[test]
    fn pulse_starts_at_base_size() {
        let g = geom();
        for phase in [0.0, 0.5] {
            let s = MotionState { phase, ..state() };
            let (_, _, half) = sprite_pose(3, 0, g, &s);
            assert!((half - s.half).abs() < 1e-5);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let g = geom();
        let s = state();
        let a = render_frame(2, 1, 5, g, &s);
        let b = render_frame(2, 1, 5, g, &s);
        assert_eq!(a, b);
    }

    #[test]
    fn clipped_sprite_renders_without_error() {
        let g = geom();
        let s = MotionState {
            x0: 31.0,
            y0: 0.5,
            half: 6.0,
            phase: 0.0,
        };
        let f = render_frame(0, 0, 0, g, &s);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(f.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn shapes_are_distinct() {
        let g = geom();
        let s = state();
        let frames: Vec<Vec<f32>> = (0..4).map(|id| render_frame(id, 3, 0, g, &s)).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(frames[i], frames[j], "shapes {i} and {j} identical");
            }
        }
    }
}
