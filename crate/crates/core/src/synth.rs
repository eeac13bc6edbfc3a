//! Deterministic synthetic datasets: clustered catalogs with
//! co-interaction structure, used by the demo pipeline and the
//! acceptance experiments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{
    ChannelKind, Interaction, InteractionLog, ItemCatalog, MetaChannel,
};
use crate::error::Result;

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Minimal two-cluster catalog (channels only) for unit tests: the first
/// half of the items sits near -sep/2 per dimension, the second half near
/// +sep/2.
#[derive(Debug, Clone)]
pub struct TwoClusterSpec {
    pub n_items: usize,
    pub dims: Vec<usize>,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

pub fn two_cluster_catalog(spec: &TwoClusterSpec) -> ItemCatalog {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let items: Vec<String> = (0..spec.n_items).map(|i| format!("i{i:03}")).collect();
    let mut catalog = ItemCatalog::from_items(items.clone()).expect("distinct ids");
    for (c, &dim) in spec.dims.iter().enumerate() {
        let mut by_item = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            let center = if i < spec.n_items / 2 {
                -spec.separation / 2.0
            } else {
                spec.separation / 2.0
            };
            let v: Vec<f64> = (0..dim)
                .map(|_| center + spec.noise * normal(&mut rng))
                .collect();
            by_item.insert(item.clone(), v);
        }
        let channel = MetaChannel::new(
            format!("dense{c}"),
            ChannelKind::Dense,
            dim,
            &by_item,
            catalog.items(),
        )
        .expect("consistent dims");
        catalog.add_channel(channel).expect("coverage");
    }
    catalog
}

/// Spec for a clustered interaction world. The latent state of an item is
/// (cluster, quality offset): clusters set the coarse geometry and the
/// base rating level; the within-cluster quality offset shifts the dense
/// channel along a fixed axis, attracts users of matching taste (hence
/// co-interaction), and moves the item's ratings.
#[derive(Debug, Clone)]
pub struct ClusterWorldSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub n_clusters: usize,
    pub dense_dim: usize,
    /// Channel noise around the cluster centers.
    pub channel_noise: f64,
    /// Probability that a multi-hot tag bit is flipped.
    pub tag_flip_prob: f64,
    pub events_per_user: usize,
    /// Probability an event targets the user's home cluster.
    pub home_prob: f64,
    pub rating_noise: f64,
    /// Spread of the within-cluster quality offset.
    pub sub_quality_spread: f64,
    /// How far one quality unit moves the dense channel.
    pub quality_axis_scale: f64,
    /// Width of a user's taste window over item quality.
    pub taste_width: f64,
    /// Fraction of items introduced late (test-split candidates).
    pub late_fraction: f64,
    pub seed: u64,
}

impl Default for ClusterWorldSpec {
    fn default() -> Self {
        Self {
            n_items: 120,
            n_users: 30,
            n_clusters: 4,
            dense_dim: 3,
            channel_noise: 0.25,
            tag_flip_prob: 0.05,
            events_per_user: 24,
            home_prob: 0.8,
            rating_noise: 0.3,
            sub_quality_spread: 0.6,
            quality_axis_scale: 2.0,
            taste_width: 0.25,
            late_fraction: 0.06,
            seed: 7,
        }
    }
}

/// A generated world: log, catalog (dense + multi-hot channel), the latent
/// cluster label and quality per catalog item.
#[derive(Debug, Clone)]
pub struct ClusterWorld {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
    pub cluster_of: Vec<usize>,
    pub quality_of: Vec<f64>,
}

const DAY: i64 = 86_400;

impl ClusterWorld {
    pub fn generate(spec: &ClusterWorldSpec) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let k = spec.n_clusters;
        let horizon_span = 365 * DAY;

        // Cluster geometry, base quality per cluster, and the fixed axis
        // along which within-cluster quality shifts the dense channel.
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..spec.dense_dim).map(|_| 2.0 * normal(&mut rng)).collect())
            .collect();
        let base_quality: Vec<f64> = (0..k)
            .map(|c| 1.0 + 4.0 * c as f64 / (k.max(2) - 1) as f64)
            .collect();
        let mut axis: Vec<f64> = (0..spec.dense_dim).map(|_| normal(&mut rng)).collect();
        let norm = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut axis {
            *x /= norm;
        }

        // Items: cluster round-robin, quality offset per item, late items
        // round-robin as well so each cluster has test candidates.
        let item_ids: Vec<String> = (0..spec.n_items).map(|i| format!("it{i:04}")).collect();
        let cluster: Vec<usize> = (0..spec.n_items).map(|i| i % k).collect();
        let quality: Vec<f64> = (0..spec.n_items)
            .map(|i| {
                base_quality[cluster[i]]
                    + rng.random_range(-spec.sub_quality_spread..spec.sub_quality_spread)
            })
            .collect();
        let n_late = ((spec.n_items as f64 * spec.late_fraction).ceil() as usize).max(1);
        let mut intro: Vec<i64> = (0..spec.n_items)
            .map(|_| rng.random_range(0..(3 * horizon_span / 4)))
            .collect();
        for j in 0..n_late {
            let idx = spec.n_items - 1 - j;
            intro[idx] = rng.random_range((9 * horizon_span / 10)..(95 * horizon_span / 100));
        }

        // Per-user event streams: taste-weighted picks inside the chosen
        // cluster, so co-interaction tracks both the cluster and the
        // within-cluster quality neighborhood.
        let mut rows: Vec<Interaction> = Vec::new();
        let pick_weighted = |pool: &[usize], taste: f64, rng: &mut ChaCha12Rng| -> usize {
            let weights: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    let d = (quality[i] - taste) / spec.taste_width;
                    (-0.5 * d * d).exp().max(1e-9)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (w, &i) in weights.iter().zip(pool) {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            *pool.last().expect("nonempty pool")
        };
        for u in 0..spec.n_users {
            let user = format!("u{u:03}");
            let home = u % k;
            let taste = base_quality[home]
                + rng.random_range(-spec.sub_quality_spread..spec.sub_quality_spread);
            let start = rng.random_range(0..(4 * horizon_span / 5));
            let mut t = start;
            for _ in 0..spec.events_per_user {
                t += rng.random_range(DAY..(6 * DAY));
                let want_home = rng.random_bool(spec.home_prob);
                let candidates: Vec<usize> = (0..spec.n_items)
                    .filter(|&i| intro[i] <= t && (!want_home || cluster[i] == home))
                    .collect();
                let pool: Vec<usize> = if candidates.is_empty() {
                    (0..spec.n_items).filter(|&i| intro[i] <= t).collect()
                } else {
                    candidates
                };
                if pool.is_empty() {
                    continue;
                }
                let item = pick_weighted(&pool, taste, &mut rng);
                let rating = quality[item] + spec.rating_noise * normal(&mut rng);
                rows.push(Interaction {
                    user: user.clone(),
                    item: item_ids[item].clone(),
                    rating,
                    timestamp: t,
                });
            }
        }
        // Guarantee late items are seen at least once, by a late user sweep.
        for j in 0..n_late {
            let idx = spec.n_items - 1 - j;
            let user = format!("u{:03}", j % spec.n_users);
            let t = intro[idx] + rng.random_range(0..(3 * DAY));
            let rating = quality[idx] + spec.rating_noise * normal(&mut rng);
            rows.push(Interaction {
                user,
                item: item_ids[idx].clone(),
                rating,
                timestamp: t,
            });
        }
        let log = InteractionLog::new(rows);

        // Catalog over interacted items plus the two channels.
        let mut catalog = ItemCatalog::from_log(&log);
        let mut dense = BTreeMap::new();
        let mut tags = BTreeMap::new();
        for i in 0..spec.n_items {
            let c = cluster[i];
            let sub = quality[i] - base_quality[c];
            let v: Vec<f64> = centers[c]
                .iter()
                .zip(&axis)
                .map(|(&x, &a)| {
                    x + spec.quality_axis_scale * sub * a + spec.channel_noise * normal(&mut rng)
                })
                .collect();
            dense.insert(item_ids[i].clone(), v);
            let tag: Vec<f64> = (0..k)
                .map(|j| {
                    let hot = j == c;
                    let flip = rng.random_bool(spec.tag_flip_prob);
                    if hot != flip {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            tags.insert(item_ids[i].clone(), tag);
        }
        catalog.add_channel(MetaChannel::new(
            "embedding",
            ChannelKind::Dense,
            spec.dense_dim,
            &dense,
            catalog.items(),
        )?)?;
        catalog.add_channel(MetaChannel::new(
            "tags",
            ChannelKind::MultiHot,
            k,
            &tags,
            catalog.items(),
        )?)?;
        let cluster_of = catalog
            .items()
            .iter()
            .map(|id| {
                let i: usize = id[2..].parse().expect("generated id");
                cluster[i]
            })
            .collect();
        let quality_of = catalog
            .items()
            .iter()
            .map(|id| {
                let i: usize = id[2..].parse().expect("generated id");
                quality[i]
            })
            .collect();
        Ok(Self {
            log,
            catalog,
            cluster_of,
            quality_of,
        })
    }
}

/// Spec for a two-archetype world: each channel carries an independent
/// cluster structure plus a continuous taste coordinate, and every user
/// follows exactly one channel both in what they co-interact with and in
/// how they rate.
#[derive(Debug, Clone)]
pub struct ArchetypeWorldSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub clusters_per_channel: [usize; 2],
    pub dense_dim: usize,
    pub channel_noise: f64,
    /// How far one taste unit moves a channel vector along its axis.
    pub taste_axis_scale: f64,
    /// Width of a user's taste window in their channel.
    pub taste_width: f64,
    pub events_per_user: usize,
    pub home_prob: f64,
    pub rating_noise: f64,
    /// Weight of the user's own taste mismatch in their channel.
    pub taste_gain: f64,
    /// Rating penalty for items outside the user's home cluster.
    pub home_penalty: f64,
    /// Probability an event is driven by the user's primary channel;
    /// the rest go through the other channel. Archetypes are mixtures,
    /// not exclusive channels.
    pub own_channel_prob: f64,
    /// Probability of a pure-exploration event: a uniform random pick,
    /// rated through the driving channel (usually poorly). These give
    /// every user a few far-everywhere items, anchoring their local loss
    /// outside the taste neighborhood.
    pub uniform_prob: f64,
    pub seed: u64,
}

impl Default for ArchetypeWorldSpec {
    fn default() -> Self {
        Self {
            n_items: 150,
            n_users: 40,
            clusters_per_channel: [5, 5],
            dense_dim: 3,
            channel_noise: 0.2,
            taste_axis_scale: 1.2,
            taste_width: 0.35,
            events_per_user: 18,
            home_prob: 0.85,
            rating_noise: 0.25,
            taste_gain: 1.2,
            home_penalty: 0.8,
            own_channel_prob: 0.8,
            uniform_prob: 0.12,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchetypeWorld {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
    /// Per-channel cluster label per catalog item.
    pub labels: [Vec<usize>; 2],
    /// Per-channel taste coordinate per catalog item.
    pub taste: [Vec<f64>; 2],
    /// user id -> (archetype channel, home cluster in that channel).
    pub user_home: BTreeMap<String, (usize, usize)>,
}

impl ArchetypeWorld {
    pub fn generate(spec: &ArchetypeWorldSpec) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let [k1, k2] = spec.clusters_per_channel;
        let item_ids: Vec<String> = (0..spec.n_items).map(|i| format!("it{i:04}")).collect();
        // Grid assignment decouples the two labelings; each item also gets
        // an independent taste coordinate per channel.
        let label1: Vec<usize> = (0..spec.n_items).map(|i| i % k1).collect();
        let label2: Vec<usize> = (0..spec.n_items).map(|i| (i / k1) % k2).collect();
        let taste1: Vec<f64> = (0..spec.n_items).map(|_| rng.random_range(-1.0..1.0)).collect();
        let taste2: Vec<f64> = (0..spec.n_items).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Per-channel cluster quality levels. A user's ratings are driven by
        // their own channel's levels, so the population mean mixes both
        // channels while each user's vector stays single-channel.
        let quality: [Vec<f64>; 2] = [
            (0..k1).map(|c| 1.0 + 4.0 * c as f64 / (k1.max(2) - 1) as f64).collect(),
            (0..k2).map(|c| 1.0 + 4.0 * c as f64 / (k2.max(2) - 1) as f64).collect(),
        ];
        let centers: [Vec<Vec<f64>>; 2] = [
            (0..k1)
                .map(|_| (0..spec.dense_dim).map(|_| 2.0 * normal(&mut rng)).collect())
                .collect(),
            (0..k2)
                .map(|_| (0..spec.dense_dim).map(|_| 2.0 * normal(&mut rng)).collect())
                .collect(),
        ];
        let mut axes: [Vec<f64>; 2] = [vec![], vec![]];
        for axis in &mut axes {
            let mut a: Vec<f64> = (0..spec.dense_dim).map(|_| normal(&mut rng)).collect();
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut a {
                *x /= n;
            }
            *axis = a;
        }

        let mut rows = Vec::new();
        let mut user_home = BTreeMap::new();
        let all_labels = [&label1, &label2];
        let all_tastes = [&taste1, &taste2];
        for u in 0..spec.n_users {
            let user = format!("u{u:03}");
            let arch = u % 2;
            let homes = [(u / 2) % k1, (u / 2) % k2];
            user_home.insert(user.clone(), (arch, homes[arch]));
            let my_tastes = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            // A compact event window keeps all of this user's events inside
            // one co-interaction horizon.
            let start = rng.random_range(0..(30 * DAY));
            let mut t = start;
            for _ in 0..spec.events_per_user {
                t += rng.random_range(600..(DAY / 4));
                // Every event is driven by one channel; the archetype sets
                // the mixture.
                let ch = if rng.random_bool(spec.own_channel_prob) {
                    arch
                } else {
                    1 - arch
                };
                let labels = all_labels[ch];
                let tastes = all_tastes[ch];
                let home = homes[ch];
                let my_taste = my_tastes[ch];
                let item = if rng.random_bool(spec.uniform_prob) {
                    rng.random_range(0..spec.n_items)
                } else {
                    let want_home = rng.random_bool(spec.home_prob);
                    let pool: Vec<usize> = (0..spec.n_items)
                        .filter(|&i| !want_home || labels[i] == home)
                        .collect();
                    // Taste-weighted pick inside the pool.
                    let weights: Vec<f64> = pool
                        .iter()
                        .map(|&i| {
                            let d = (tastes[i] - my_taste) / spec.taste_width;
                            (-0.5 * d * d).exp().max(1e-9)
                        })
                        .collect();
                    let total: f64 = weights.iter().sum();
                    let mut pickpoint = rng.random_range(0.0..total);
                    let mut item = *pool.last().expect("nonempty pool");
                    for (w, &i) in weights.iter().zip(&pool) {
                        if pickpoint < *w {
                            item = i;
                            break;
                        }
                        pickpoint -= w;
                    }
                    item
                };
                // The driving channel also frames the rating: its cluster
                // quality, taste match, and home affinity.
                let rating = quality[ch][labels[item]]
                    - spec.taste_gain * (tastes[item] - my_taste).abs()
                    - if labels[item] == home { 0.0 } else { spec.home_penalty }
                    + spec.rating_noise * normal(&mut rng);
                rows.push(Interaction {
                    user: user.clone(),
                    item: item_ids[item].clone(),
                    rating,
                    timestamp: t,
                });
            }
        }
        let log = InteractionLog::new(rows);
        let mut catalog = ItemCatalog::from_log(&log);
        for (ch, labels, tastes) in [(0usize, &label1, &taste1), (1usize, &label2, &taste2)] {
            let mut by_item = BTreeMap::new();
            for i in 0..spec.n_items {
                let v: Vec<f64> = centers[ch][labels[i]]
                    .iter()
                    .zip(&axes[ch])
                    .map(|(&x, &a)| {
                        x + spec.taste_axis_scale * tastes[i] * a
                            + spec.channel_noise * normal(&mut rng)
                    })
                    .collect();
                by_item.insert(item_ids[i].clone(), v);
            }
            catalog.add_channel(MetaChannel::new(
                format!("view{ch}"),
                ChannelKind::Dense,
                spec.dense_dim,
                &by_item,
                catalog.items(),
            )?)?;
        }
        let remap_usize = |xs: &Vec<usize>| -> Vec<usize> {
            catalog
                .items()
                .iter()
                .map(|id| {
                    let i: usize = id[2..].parse().expect("generated id");
                    xs[i]
                })
                .collect()
        };
        let remap_f64 = |xs: &Vec<f64>| -> Vec<f64> {
            catalog
                .items()
                .iter()
                .map(|id| {
                    let i: usize = id[2..].parse().expect("generated id");
                    xs[i]
                })
                .collect()
        };
        let labels = [remap_usize(&label1), remap_usize(&label2)];
        let taste = [remap_f64(&taste1), remap_f64(&taste2)];
        Ok(Self {
            log,
            catalog,
            labels,
            taste,
            user_home,
        })
    }
}

/// Write a world's data files (interactions CSV, channel files, manifest)
/// into a directory, in the formats the CLI ingests.
pub fn write_dataset_files(log: &InteractionLog, catalog: &ItemCatalog, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("interactions.csv"))?;
    writeln!(f, "user,item,rating,timestamp")?;
    for ev in log.iter() {
        writeln!(f, "{},{},{},{}", ev.user, ev.item, ev.rating, ev.timestamp)?;
    }
    let mut manifest = String::from("name,kind,dim,path\n");
    for ch in catalog.channels() {
        let (kind, file) = match ch.kind {
            ChannelKind::Numeric => ("numeric", format!("{}.csv", ch.name)),
            ChannelKind::MultiHot => ("multi-hot", format!("{}.csv", ch.name)),
            ChannelKind::Dense => ("dense", format!("{}.jsonl", ch.name)),
        };
        manifest.push_str(&format!("{},{},{},{}\n", ch.name, kind, ch.dim, file));
        let mut f = std::fs::File::create(dir.join(&file))?;
        match ch.kind {
            ChannelKind::Numeric | ChannelKind::MultiHot => {
                let header: Vec<String> = (0..ch.dim).map(|i| format!("v{i}")).collect();
                writeln!(f, "item,{}", header.join(","))?;
                for (i, item) in catalog.items().iter().enumerate() {
                    let vals: Vec<String> =
                        ch.vector(i).iter().map(|x| format!("{x}")).collect();
                    writeln!(f, "{},{}", item, vals.join(","))?;
                }
            }
            ChannelKind::Dense => {
                for (i, item) in catalog.items().iter().enumerate() {
                    let vals: Vec<String> =
                        ch.vector(i).iter().map(|x| format!("{x}")).collect();
                    writeln!(f, "{{\"item\":\"{}\",\"vec\":[{}]}}", item, vals.join(","))?;
                }
            }
        }
    }
    std::fs::write(dir.join("channels.csv"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_channels, load_interactions};

    #[test]
    fn cluster_world_is_deterministic() {
        let spec = ClusterWorldSpec::default();
        let w1 = ClusterWorld::generate(&spec).unwrap();
        let w2 = ClusterWorld::generate(&spec).unwrap();
        assert_eq!(w1.log.len(), w2.log.len());
        assert_eq!(w1.cluster_of, w2.cluster_of);
        assert_eq!(w1.catalog.len(), w2.catalog.len());
    }

    #[test]
    fn dataset_files_roundtrip() {
        let spec = ClusterWorldSpec {
            n_items: 30,
            n_users: 8,
            events_per_user: 10,
            ..ClusterWorldSpec::default()
        };
        let world = ClusterWorld::generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_files(&world.log, &world.catalog, dir.path()).unwrap();

        let log = load_interactions(dir.path().join("interactions.csv")).unwrap();
        assert_eq!(log.len(), world.log.len());
        let mut catalog = ItemCatalog::from_log(&log);
        load_channels(dir.path().join("channels.csv"), &mut catalog).unwrap();
        assert_eq!(catalog.channels().len(), 2);
        assert_eq!(catalog.len(), world.catalog.len());
        for i in 0..catalog.len() {
            assert_eq!(
                catalog.channels()[0].vector(i),
                world.catalog.channels()[0].vector(i)
            );
        }
    }

    #[test]
    fn archetype_world_structure() {
        let world = ArchetypeWorld::generate(&ArchetypeWorldSpec::default()).unwrap();
        assert_eq!(world.catalog.channels().len(), 2);
        assert_eq!(world.labels[0].len(), world.catalog.len());
        // Both archetypes are present.
        let archs: std::collections::BTreeSet<usize> =
            world.user_home.values().map(|&(a, _)| a).collect();
        assert_eq!(archs.len(), 2);
    }
}
