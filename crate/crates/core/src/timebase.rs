//! Conversions between virtual seconds and frame indices.
//!
//! Timestamps are `f64` seconds. Products like `0.1 * 30.0` land a few ulps
//! away from the integer they represent, so rounding to frames goes through a
//! small tolerance instead of a raw `ceil`/`floor`.

/// Tolerance, in frames, applied when snapping `t * k` to an integer.
pub const FRAME_EPS: f64 = 1e-9;

/// Nominal timestamp of frame `index` at `fps` frames per second.
#[inline]
pub fn frame_time(index: i64, fps: f64) -> f64 {
    index as f64 / fps
}

/// `⌈t·k⌉`, tolerant to floating noise.
#[inline]
pub fn ceil_frame(t: f64, fps: f64) -> i64 {
    (t * fps - FRAME_EPS).ceil() as i64
}

/// `⌊t·k⌋`, tolerant to floating noise.
#[inline]
pub fn floor_frame(t: f64, fps: f64) -> i64 {
    (t * fps + FRAME_EPS).floor() as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snaps_near_integers() {
        assert_eq!(ceil_frame(0.1, 30.0), 3);
        assert_eq!(floor_frame(0.1, 30.0), 3);
        assert_eq!(ceil_frame(0.034, 30.0), 2);
        assert_eq!(floor_frame(0.067, 30.0), 2);
        assert_eq!(ceil_frame(frame_time(7, 30.0), 30.0), 7);
        assert_eq!(floor_frame(frame_time(7, 30.0), 30.0), 7);
    }

    #[test]
    fn zero_time() {
        assert_eq!(ceil_frame(0.0, 30.0), 0);
        assert_eq!(floor_frame(0.0, 30.0), 0);
    }
}
