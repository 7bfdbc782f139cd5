use super::*;
use proptest::prelude::*;

fn attrs(s: &str) -> Attributes {
    Attributes::parse(s).unwrap()
}

fn occupied_bounds(grid: &VoxelGrid) -> [(usize, usize); 3] {
    let g = grid.resolution();
    let mut b = [(usize::MAX, 0usize); 3];
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                if grid.occupied(x, y, z) {
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        b[a].0 = b[a].0.min(v);
                        b[a].1 = b[a].1.max(v);
                    }
                }
            }
        }
    }
    b
}

#[test]
fn same_seed_same_asset() {
    let a = sample_asset(&mut SeedRng::new(0), 8).unwrap();
    let b = sample_asset(&mut SeedRng::new(0), 8).unwrap();
    assert_eq!(a, b);
    let bits = |t: &ToyAsset| t.grid.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn small_grids_are_rejected() {
    assert!(rasterize(&attrs("box,small,red,red,plain"), [3, 3, 3], 6).is_err());
}

#[test]
fn large_boxes_span_most_of_the_grid() {
    // Enumerate every jitter outcome the sampler can produce for a large box.
    for g in [8usize, 16] {
        let base = base_extent(Size::Large, g) as isize;
        let options: Vec<usize> = (-1..=1).map(|d| (base + d).clamp(3, g as isize) as usize).collect();
        for &ex in &options {
            for &ey in &options {
                for &ez in &options {
                    let grid = rasterize(&attrs("box,large,red,blue,plain"), [ex, ey, ez], g).unwrap();
                    for (lo, hi) in occupied_bounds(&grid) {
                        let span = hi - lo + 1;
                        assert!(span as f64 >= 0.7 * g as f64, "g={g} span={span}");
                    }
                }
            }
        }
    }
}

#[test]
fn jitter_free_spheres_are_reflection_symmetric() {
    for g in [8usize, 16] {
        for size in ["small", "medium", "large"] {
            let a = attrs(&format!("sphere,{size},green,green,plain"));
            let e = base_extent(a.size, g);
            let grid = rasterize(&a, [e, e, e], g).unwrap();
            for x in 0..g {
                for y in 0..g {
                    for z in 0..g {
                        let o = grid.occupied(x, y, z);
                        let m = g - 1;
                        assert_eq!(o, grid.occupied(m - x, y, z));
                        assert_eq!(o, grid.occupied(x, m - y, z));
                        assert_eq!(o, grid.occupied(x, y, m - z));
                    }
                }
            }
        }
    }
}

#[test]
fn sampled_assets_hold_invariants() {
    let mut rng = SeedRng::new(3);
    for _ in 0..300 {
        let a = sample_asset(&mut rng, 8).unwrap();
        a.grid.check_invariants().unwrap();
        assert!(a.grid.occupied_count() > 0);
    }
}

#[test]
fn full_cube_silhouette_is_all_ones() {
    let mut grid = VoxelGrid::empty(8);
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..8 {
                grid.set(x, y, z, [0.2, 0.4, 0.6]);
            }
        }
    }
    for view in View::ALL {
        let img = render_view(&grid, view, 16).unwrap();
        assert_eq!(img.silhouette_area(), 256);
    }
}

#[test]
fn single_voxel_is_one_pixel_block() {
    let mut grid = VoxelGrid::empty(8);
    grid.set(4, 4, 4, [1.0, 1.0, 1.0]);
    for view in View::ALL {
        let img = render_view(&grid, view, 16).unwrap();
        assert_eq!(img.silhouette_area(), 4);
        let lit: Vec<(usize, usize)> = (0..16)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| img.pixel(r, c)[3] > 0.5)
            .collect();
        let (r0, c0) = lit[0];
        assert_eq!(r0 % 2, 0);
        assert_eq!(c0 % 2, 0);
        assert_eq!(lit, vec![(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)]);
    }
}

#[test]
fn empty_grid_cannot_be_rendered() {
    assert!(render_view(&VoxelGrid::empty(8), View::Front, 16).is_err());
    assert_eq!(project(&VoxelGrid::empty(8), View::Front, 16).unwrap().silhouette_area(), 0);
}

/// Independent ray march: walk all voxels, keep the one nearest to the
/// camera for each pixel column.
fn march(grid: &VoxelGrid, view: View) -> Vec<Option<[f64; 3]>> {
    let g = grid.resolution();
    let mut best: Vec<Option<(usize, [f64; 3])>> = vec![None; g * g];
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                if !grid.occupied(x, y, z) {
                    continue;
                }
                let (row, col, depth) = match view {
                    View::Front => (g - 1 - y, x, z),
                    View::Top => (z, x, g - 1 - y),
                    View::Bottom => (g - 1 - z, x, y),
                };
                let slot = &mut best[row * g + col];
                if slot.map_or(true, |(d, _)| depth < d) {
                    *slot = Some((depth, grid.color(x, y, z)));
                }
            }
        }
    }
    best.into_iter().map(|b| b.map(|(_, c)| c)).collect()
}

fn dominant(colors: &[Option<[f64; 3]>]) -> [f64; 3] {
    let mut counts: Vec<([f64; 3], usize)> = Vec::new();
    for c in colors.iter().flatten() {
        match counts.iter_mut().find(|(k, _)| k == c) {
            Some((_, n)) => *n += 1,
            None => counts.push((*c, 1)),
        }
    }
    counts.into_iter().max_by_key(|&(_, n)| n).unwrap().0
}

#[test]
fn renders_match_brute_force_ray_march() {
    let mut rng = SeedRng::new(17);
    for _ in 0..50 {
        let a = sample_asset(&mut rng, 8).unwrap();
        for view in View::ALL {
            let img = render_view(&a.grid, view, 8).unwrap();
            let want = march(&a.grid, view);
            for (i, w) in want.iter().enumerate() {
                let p = &img.data[i * 4..i * 4 + 4];
                match w {
                    Some(c) => assert_eq!(p, &[c[0], c[1], c[2], 1.0]),
                    None => assert_eq!(p, &[0.0; 4]),
                }
            }
        }
    }
}

#[test]
fn top_and_bottom_views_show_top_and_body_color() {
    for shape in ["box", "sphere", "cylinder", "cross"] {
        let a = attrs(&format!("{shape},medium,red,blue,striped"));
        let e = base_extent(a.size, 8);
        let grid = rasterize(&a, [e, e, e], 8).unwrap();
        assert_eq!(dominant(&march(&grid, View::Top)), Color::Red.rgb());
        assert_eq!(dominant(&march(&grid, View::Bottom)), Color::Blue.rgb());
    }
}

#[test]
fn bottom_view_hides_top_color_and_marking() {
    let mut rng = SeedRng::new(5);
    for _ in 0..500 {
        let a = sample_asset(&mut rng, 8).unwrap();
        let bottom = render_view(&a.grid, View::Bottom, 16).unwrap();
        let front = render_view(&a.grid, View::Front, 16).unwrap();
        let body = a.attrs.body_color.rgb();
        for p in bottom.data.chunks(4).filter(|p| p[3] > 0.5) {
            assert_eq!(&p[..3], &body, "{}", a.attrs);
        }
        assert!(front.silhouette_area() >= bottom.distinct_colors().len());
    }
}

#[test]
fn front_view_shows_top_color_and_marking() {
    let a = attrs("box,large,yellow,blue,dotted");
    let grid = rasterize(&a, [8, 8, 8], 8).unwrap();
    let front = render_view(&grid, View::Front, 8).unwrap();
    let colors = front.distinct_colors();
    let has = |c: [f64; 3]| colors.contains(&c.map(f64::to_bits));
    assert!(has(Color::Yellow.rgb()));
    assert!(has(Color::Blue.rgb()));
    assert!(has(Color::Blue.rgb().map(|c| c * 0.5)));
}

#[test]
fn token_ids_follow_field_major_layout() {
    // vocabulary enumerated field by field, value by value
    let fields: [&[&str]; 5] = [
        &["box", "sphere", "cylinder", "cross"],
        &["small", "medium", "large"],
        &["red", "green", "blue", "yellow", "cyan", "magenta"],
        &["red", "green", "blue", "yellow", "cyan", "magenta"],
        &["plain", "striped", "dotted"],
    ];
    let mut vocab = Vec::new();
    for (f, values) in fields.iter().enumerate() {
        for v in values.iter() {
            vocab.push((f, *v));
        }
    }
    assert_eq!(vocab.len(), VOCAB_SIZE);
    let lookup = |f: usize, v: &str| vocab.iter().position(|&(ff, vv)| ff == f && vv == v).unwrap();
    let words = ["box", "small", "red", "red", "plain"];
    let want: Vec<usize> = words.iter().enumerate().map(|(f, w)| lookup(f, w)).collect();
    assert_eq!(want, vec![0, 4, 7, 13, 19]);
    assert_eq!(attrs("box,small,red,red,plain").token_ids().to_vec(), want);
    assert_eq!(text_tokens(&attrs("box,small,red,red,plain")), Condition::Text([0, 4, 7, 13, 19]));
}

#[test]
fn text_tokens_are_injective_and_decodable() {
    let mut seen = std::collections::HashSet::new();
    for a in Attributes::all() {
        let ids = a.token_ids();
        assert!(seen.insert(ids));
        assert_eq!(Attributes::from_token_ids(&ids).unwrap(), a);
        assert_eq!(Attributes::parse(&a.to_string()).unwrap(), a);
    }
    assert_eq!(seen.len(), 4 * 3 * 6 * 6 * 3);
}

#[test]
fn marking_changes_exactly_one_token() {
    let a = attrs("cross,large,cyan,magenta,plain").token_ids();
    let b = attrs("cross,large,cyan,magenta,dotted").token_ids();
    assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
}

#[test]
fn unknown_attribute_values_are_errors() {
    assert!(Attributes::parse("box,huge,red,red,plain").is_err());
    assert!(Attributes::parse("box,small,red").is_err());
    assert!(Attributes::from_token_ids(&[0, 4, 7, 13, 22]).is_err());
    assert!(Attributes::from_token_ids(&[4, 4, 7, 13, 19]).is_err());
}

#[test]
fn image_patch_count() {
    let img = Image::zeros(16);
    let t = image_patches(&img, 4).unwrap();
    assert_eq!(t.shape(), &[16, 64]);
    assert!(image_patches(&img, 5).is_err());
}

#[test]
fn latent_round_trip() {
    let mut rng = SeedRng::new(8);
    for _ in 0..100 {
        let a = sample_asset(&mut rng, 8).unwrap();
        let back = latent_to_grid(&asset_to_latent(&a.grid)).unwrap();
        for (u, v) in a.grid.data().chunks(4).zip(back.data().chunks(4)) {
            assert_eq!(u[0], v[0]);
            if u[0] == 1.0 {
                for c in 1..4 {
                    assert!((u[c] - v[c]).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn zero_latent_sits_on_midpoint_and_decodes_empty() {
    let z = Tensor::zeros(vec![8, 8, 8, 4]);
    assert_eq!(latent_to_grid(&z).unwrap().occupied_count(), 0);
}

#[test]
fn out_of_range_latent_colors_are_clamped() {
    let z = Tensor::from_fn(vec![8, 8, 8, 4], |i| if i % 4 == 0 { 1.0 } else { 3.0 * ((i % 3) as f64 - 1.0) });
    let grid = latent_to_grid(&z).unwrap();
    grid.check_invariants().unwrap();
    assert!(grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn patchify_round_trips(seed in any::<u64>()) {
        let mut rng = SeedRng::new(seed);
        let lat: Vec<f64> = (0..8 * 8 * 8 * 4).map(|_| rng.normal()).collect();
        let tok = patchify(&lat, 8).unwrap();
        prop_assert_eq!(unpatchify(&tok, 8).unwrap(), lat);
    }
}
