use dmaseg::types::MaskSequence;
use dmaseg_web::{difference_magnitude, shift, DemoClip};

#[test]
fn renders_rgba_frames_of_the_requested_size() {
    let clip = DemoClip::new(1, 2, 64, 6, 3).unwrap();
    assert_eq!((clip.size(), clip.frames()), (64, 6));
    assert_eq!(clip.frame_rgba(0, true).len(), 64 * 64 * 4);
    assert!(clip.frame_rgba(6, false).is_empty());
    assert!(clip.label().contains(" doing "));
}

#[test]
fn difference_is_zero_on_still_frames_and_the_last_slot() {
    let still = vec![vec![0.3f32; 12]; 3];
    assert!(difference_magnitude(&still, 0).iter().all(|&d| d == 0.0));
    let clip = DemoClip::new(0, 1, 64, 4, 0).unwrap();
    let last = clip.difference_rgba(3);
    assert!(last.chunks_exact(4).all(|p| p[0] == 0));
    let moving = clip.difference_rgba(0);
    assert!(moving.chunks_exact(4).any(|p| p[0] == 255));
}

#[test]
fn unshifted_mask_scores_perfectly_and_shifts_degrade() {
    let clip = DemoClip::new(2, 0, 64, 3, 1).unwrap();
    assert_eq!(clip.shifted_scores(0, 0).unwrap(), vec![1.0, 1.0, 1.0]);
    let near = clip.shifted_scores(2, 0).unwrap();
    let far = clip.shifted_scores(12, 5).unwrap();
    assert!(near[0] < 1.0 && far[0] < near[0] && far[2] < near[2]);
}

#[test]
fn shift_moves_pixels_and_drops_the_overflow() {
    let mut m = MaskSequence::empty(1, 1, 2, 3);
    m.masks[0] = vec![1, 0, 1, 0, 0, 0];
    assert_eq!(shift(&m, 1, 1).masks[0], vec![0, 0, 0, 0, 1, 0]);
}
