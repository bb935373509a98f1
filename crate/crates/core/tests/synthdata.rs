//! Empirical properties of the synthetic generator and annotators.

use fedicra_core::losses::UNLABELED;
use fedicra_core::synthdata::*;

fn site(task: Task, annotation: AnnotationType, n: usize, site_id: usize) -> SiteData {
    generate_site(&SiteSpec {
        site_id,
        n_train: n,
        n_test: 1,
        size: 48,
        task,
        shift: DomainShift::preset(site_id),
        annotation,
        seed: 99,
    })
    .unwrap()
}

#[test]
fn foreground_fraction_in_range() {
    let mut seen = 0;
    for (k, task) in [Task::Nested, Task::Blob].into_iter().enumerate() {
        for s in 0..2 {
            for sample in &site(task, AnnotationType::Point, 50, 2 * k + s).train {
                let fg = sample.full_mask.iter().filter(|&&m| m > 0).count() as f64 / sample.full_mask.len() as f64;
                assert!((0.02..=0.5).contains(&fg), "fraction {}", fg);
                seen += 1;
            }
        }
    }
    assert_eq!(seen, 200);
}

#[test]
fn nested_inner_subset_of_outer() {
    for sample in &site(Task::Nested, AnnotationType::Point, 100, 3).train {
        let (h, w) = (48usize, 48usize);
        for y in 0..h {
            for x in 0..w {
                if sample.full_mask[y * w + x] == 2 {
                    // the inner region never touches background directly
                    for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy >= 0 && xx >= 0 && yy < h as i32 && xx < w as i32 {
                            assert_ne!(sample.full_mask[yy as usize * w + xx as usize], 0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn scribble1_is_sparse() {
    for (k, task) in [Task::Nested, Task::Blob].into_iter().enumerate() {
        for sample in &site(task, AnnotationType::Scribble1, 50, k).train {
            let frac = sample.sparse.labels.num_labeled() as f64 / (48.0 * 48.0);
            assert!(frac < 0.10, "labeled fraction {}", frac);
        }
    }
}

#[test]
fn exact_annotations_never_disagree() {
    for kind in [AnnotationType::Point, AnnotationType::Scribble1, AnnotationType::Scribble2, AnnotationType::Block] {
        for task in [Task::Nested, Task::Blob] {
            for sample in &site(task, kind, 25, 1).train {
                assert!(sample.sparse.labels.num_labeled() > 0);
                for (l, m) in sample.sparse.labels.labels().iter().zip(&sample.full_mask) {
                    assert!(*l == UNLABELED || l == m, "{:?} {:?}", kind, task);
                }
            }
        }
    }
}

#[test]
fn box_labels_mostly_agree() {
    let (mut agree, mut total) = (0usize, 0usize);
    for k in 0..4 {
        for sample in &site(Task::Nested, AnnotationType::BBox, 25, k).train {
            assert!(sample.sparse.labels.num_labeled() > 0);
            for (l, m) in sample.sparse.labels.labels().iter().zip(&sample.full_mask) {
                if *l != UNLABELED && *l != 0 {
                    total += 1;
                    agree += (l == m) as usize;
                }
            }
        }
    }
    let rate = agree as f64 / total as f64;
    println!("box foreground agreement {:.4} over {} pixels", rate, total);
    assert!(rate >= 0.95, "{}", rate);
}

#[test]
fn point_labels_count_classes() {
    for sample in &site(Task::Blob, AnnotationType::Point, 20, 0).train {
        assert_eq!(sample.sparse.labels.num_labeled(), 2);
    }
}
